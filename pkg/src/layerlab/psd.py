"""Parser for a well-defined subset of Adobe Photoshop documents.

Supported: PSD version 1, 8-bit RGB, compression codes 0 (raw) and 1
(PackBits RLE).  Everything else raises a typed ``PsdError`` subclass.
Group divider records are parsed and retained; helpers flatten groups to a
plain bottom-to-top layer list (group opacity multiplies member alpha).
Files using raster masks, clipping masks, adjustment layers, or non-normal
blend modes are reported by ``unsupported_features`` so callers can skip
them instead of producing a silently wrong composite.

Layout walked here (header / color mode data / image resources /
layer-and-mask info / image data) follows the published Adobe format
documentation; every read is bounds-checked against the declared section
lengths.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from layerlab.imaging import LayerStack, RgbaImage, RgbImage


class PsdError(Exception):
    """Base class for all structured PSD parsing errors."""


class BadSignature(PsdError):
    pass


class UnsupportedVersion(PsdError):
    pass


class UnsupportedDepth(PsdError):
    pass


class UnsupportedColorMode(PsdError):
    pass


class TruncatedSection(PsdError):
    pass


class UnknownCompression(PsdError):
    pass


class UnsupportedBlendMode(PsdError):
    pass


class UnsupportedFeature(PsdError):
    """File uses features outside the supported subset (masks, clipping, ...)."""


class SectionType(enum.Enum):
    NONE = "none"
    GROUP_OPEN = "group-open"
    GROUP_CLOSE = "group-close"


# Tagged-block keys that mark an adjustment/fill layer; rasterizing these
# would require re-implementing Photoshop's adjustment pipeline.
ADJUSTMENT_KEYS = frozenset(
    {
        "SoCo", "GdFl", "PtFl", "brit", "levl", "curv", "expA", "vibA",
        "hue ", "hue2", "blnc", "blwh", "mixr", "clrL", "phfl", "nvrt",
        "post", "thrs", "selc", "grdm",
    }
)

_GROUP_BLEND_OK = frozenset({"pass", "norm"})


class _Reader:
    """Bounds-checked big-endian cursor over a byte buffer."""

    def __init__(self, data: bytes, offset: int = 0, end: int | None = None):
        self.data = data
        self.pos = offset
        self.end = len(data) if end is None else end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise TruncatedSection(
                f"need {n} bytes at offset {self.pos}, section ends at {self.end}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def skip(self, n: int) -> None:
        self.take(n)

    def sub(self, n: int) -> "_Reader":
        """A child reader restricted to the next ``n`` bytes (consumes them)."""
        if n < 0 or self.pos + n > self.end:
            raise TruncatedSection(
                f"declared section of {n} bytes at offset {self.pos} exceeds data"
            )
        child = _Reader(self.data, self.pos, self.pos + n)
        self.pos += n
        return child

    def remaining(self) -> int:
        return self.end - self.pos

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def i16(self) -> int:
        return struct.unpack(">h", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def i32(self) -> int:
        return struct.unpack(">i", self.take(4))[0]


@dataclass(frozen=True)
class PsdHeader:
    version: int
    channels: int
    height: int
    width: int
    depth: int
    color_mode: int


@dataclass
class PsdLayerRecord:
    name: str
    bbox: tuple[int, int, int, int]  # (top, left, bottom, right), canvas coords
    opacity: int  # 0..255
    blend_mode: str  # 4-char key, e.g. "norm"
    visible: bool
    clipping: bool
    section_type: SectionType = SectionType.NONE
    channels: dict[int, np.ndarray] = field(default_factory=dict)  # id -> (rows, cols) u8
    has_mask: bool = False
    tagged_keys: tuple[str, ...] = ()

    @property
    def bbox_height(self) -> int:
        return self.bbox[2] - self.bbox[0]

    @property
    def bbox_width(self) -> int:
        return self.bbox[3] - self.bbox[1]

    @property
    def is_divider(self) -> bool:
        return self.section_type is not SectionType.NONE


@dataclass
class PsdDocument:
    header: PsdHeader
    layers: list[PsdLayerRecord]  # bottom-to-top
    merged_composite: RgbImage | None


def unpack_rle(compressed: bytes, expected_len: int) -> bytes:
    """Decode one PackBits-compressed run to exactly ``expected_len`` bytes.

    Control byte n: 0..127 copies n+1 literal bytes, 129..255 repeats the
    next byte 257-n times, 128 is a no-op.
    """
    out = bytearray()
    pos = 0
    n = len(compressed)
    while pos < n:
        ctrl = compressed[pos]
        pos += 1
        if ctrl == 128:
            continue
        if ctrl < 128:
            count = ctrl + 1
            if pos + count > n:
                raise TruncatedSection("RLE literal run exceeds input")
            out += compressed[pos : pos + count]
            pos += count
        else:
            if pos >= n:
                raise TruncatedSection("RLE repeat run has no value byte")
            out += bytes([compressed[pos]]) * (257 - ctrl)
            pos += 1
        if len(out) > expected_len:
            raise TruncatedSection(
                f"RLE output overruns expected {expected_len} bytes"
            )
    if len(out) != expected_len:
        raise TruncatedSection(
            f"RLE output is {len(out)} bytes, expected {expected_len}"
        )
    return bytes(out)


def _decode_plane(reader: _Reader, compression: int, rows: int, cols: int) -> np.ndarray:
    if compression == 0:
        raw = reader.take(rows * cols)
    elif compression == 1:
        counts = [reader.u16() for _ in range(rows)]
        raw = b"".join(unpack_rle(reader.take(c), cols) for c in counts)
    else:
        raise UnknownCompression(f"compression code {compression} not supported")
    return np.frombuffer(raw, dtype=np.uint8).reshape(rows, cols)


def _read_pascal_name(reader: _Reader, pad: int) -> str:
    length = reader.u8()
    raw = reader.take(length)
    reader.skip(-(length + 1) % pad)
    return raw.decode("latin-1")


def _parse_tagged_blocks(reader: _Reader) -> dict[str, bytes]:
    blocks: dict[str, bytes] = {}
    while reader.remaining() >= 12:
        sig = reader.take(4)
        if sig not in (b"8BIM", b"8B64"):
            raise TruncatedSection(f"bad tagged-block signature {sig!r}")
        key = reader.take(4).decode("latin-1")
        size = reader.u32()
        blocks[key] = reader.take(size)
    if reader.remaining():
        raise TruncatedSection("trailing bytes after tagged blocks")
    return blocks


def _parse_layer_record(reader: _Reader) -> tuple[PsdLayerRecord, list[tuple[int, int]]]:
    top, left, bottom, right = (reader.i32() for _ in range(4))
    n_channels = reader.u16()
    channel_decl = [(reader.i16(), reader.u32()) for _ in range(n_channels)]
    if reader.take(4) != b"8BIM":
        raise TruncatedSection("missing blend-mode signature in layer record")
    blend_mode = reader.take(4).decode("latin-1")
    opacity = reader.u8()
    clipping = bool(reader.u8())
    flags = reader.u8()
    visible = not bool(flags & 2)
    reader.skip(1)  # filler

    extra = reader.sub(reader.u32())
    mask_size = extra.u32()
    extra.skip(mask_size)
    extra.skip(extra.u32())  # blending ranges
    name = _read_pascal_name(extra, pad=4)
    blocks = _parse_tagged_blocks(extra)

    if "luni" in blocks and len(blocks["luni"]) >= 4:
        luni = blocks["luni"]
        n_code_units = struct.unpack(">I", luni[:4])[0]
        text = luni[4 : 4 + 2 * n_code_units].decode("utf-16-be", "replace")
        name = text.rstrip("\x00") or name

    section_type = SectionType.NONE
    if "lsct" in blocks and len(blocks["lsct"]) >= 4:
        divider = struct.unpack(">I", blocks["lsct"][:4])[0]
        if divider == 3:
            section_type = SectionType.GROUP_OPEN
        elif divider in (1, 2):
            section_type = SectionType.GROUP_CLOSE
        if len(blocks["lsct"]) >= 12:
            blend_mode = blocks["lsct"][8:12].decode("latin-1")

    record = PsdLayerRecord(
        name=name,
        bbox=(top, left, bottom, right),
        opacity=opacity,
        blend_mode=blend_mode,
        visible=visible,
        clipping=clipping,
        section_type=section_type,
        has_mask=mask_size > 0,
        tagged_keys=tuple(sorted(blocks)),
    )
    return record, channel_decl


def _parse_layer_channels(
    reader: _Reader, record: PsdLayerRecord, decl: list[tuple[int, int]]
) -> None:
    rows, cols = record.bbox_height, record.bbox_width
    for channel_id, length in decl:
        chan = reader.sub(length)
        compression = chan.u16()
        if channel_id <= -2:
            # Layer/vector mask plane: sized by the mask rect, not the bbox.
            # Flagged via has_mask; payload is consumed but not decoded.
            chan.skip(chan.remaining())
            continue
        if rows <= 0 or cols <= 0:
            record.channels[channel_id] = np.zeros((max(rows, 0), max(cols, 0)), np.uint8)
            chan.skip(chan.remaining())
            continue
        record.channels[channel_id] = _decode_plane(chan, compression, rows, cols)


def _parse_merged_composite(reader: _Reader, header: PsdHeader) -> RgbImage | None:
    h, w, n = header.height, header.width, header.channels
    compression = reader.u16()
    if h == 0 or w == 0:
        return None
    if compression == 0:
        planes = [
            np.frombuffer(reader.take(h * w), np.uint8).reshape(h, w) for _ in range(n)
        ]
    elif compression == 1:
        counts = [reader.u16() for _ in range(n * h)]
        planes = []
        for p in range(n):
            rows = [
                unpack_rle(reader.take(counts[p * h + r]), w) for r in range(h)
            ]
            planes.append(np.frombuffer(b"".join(rows), np.uint8).reshape(h, w))
    else:
        raise UnknownCompression(f"composite compression code {compression}")
    rgb = np.stack(planes[:3], axis=-1).astype(np.float64) / 255.0
    return RgbImage(rgb)


def parse_psd(data: bytes) -> PsdDocument:
    """Parse a PSD byte string into header, layer records, and composite."""
    reader = _Reader(data)
    if reader.take(4) != b"8BPS":
        raise BadSignature("not a PSD file (missing 8BPS signature)")
    version = reader.u16()
    if version != 1:
        raise UnsupportedVersion(f"PSD version {version} (only version 1 supported)")
    reader.skip(6)
    channels = reader.u16()
    height = reader.u32()
    width = reader.u32()
    depth = reader.u16()
    color_mode = reader.u16()
    if depth != 8:
        raise UnsupportedDepth(f"{depth}-bit channels (only 8-bit supported)")
    if color_mode != 3:
        raise UnsupportedColorMode(f"color mode {color_mode} (only RGB supported)")
    header = PsdHeader(version, channels, height, width, depth, color_mode)

    reader.skip(reader.u32())  # color mode data
    reader.skip(reader.u32())  # image resources

    layer_section = reader.sub(reader.u32())
    layers: list[PsdLayerRecord] = []
    if layer_section.remaining() >= 4:
        info = layer_section.sub(layer_section.u32())
        if info.remaining():
            count = abs(info.i16())
            decls = []
            for _ in range(count):
                record, decl = _parse_layer_record(info)
                layers.append(record)
                decls.append(decl)
            for record, decl in zip(layers, decls):
                _parse_layer_channels(info, record, decl)
        # Global mask info and document tagged blocks follow; not needed.

    merged = _parse_merged_composite(reader, header)
    return PsdDocument(header=header, layers=layers, merged_composite=merged)


def layer_to_rgba(
    record: PsdLayerRecord,
    canvas: tuple[int, int],
    *,
    extra_opacity: float = 1.0,
) -> RgbaImage:
    """Place a parsed layer onto the canvas as a straight-alpha RGBA raster.

    Pixels outside the bbox are fully transparent; a missing alpha plane
    means alpha 1 inside the bbox; layer opacity scales alpha by o/255;
    invisible layers come back fully transparent.
    """
    if record.blend_mode != "norm":
        raise UnsupportedBlendMode(
            f"layer {record.name!r} uses blend mode {record.blend_mode!r}"
        )
    w, h = canvas
    out = np.zeros((h, w, 4))
    if not record.visible or extra_opacity == 0.0:
        return RgbaImage(out)

    top, left, bottom, right = record.bbox
    y0, y1 = max(top, 0), min(bottom, h)
    x0, x1 = max(left, 0), min(right, w)
    if y0 >= y1 or x0 >= x1:
        return RgbaImage(out)

    for missing in (0, 1, 2):
        if missing not in record.channels:
            raise PsdError(f"layer {record.name!r} lacks channel {missing}")
    sl = (slice(y0 - top, y1 - top), slice(x0 - left, x1 - left))
    for i, channel_id in enumerate((0, 1, 2)):
        out[y0:y1, x0:x1, i] = record.channels[channel_id][sl] / 255.0
    if -1 in record.channels:
        alpha = record.channels[-1][sl] / 255.0
    else:
        alpha = np.ones((y1 - y0, x1 - x0))
    out[y0:y1, x0:x1, 3] = alpha * (record.opacity / 255.0) * extra_opacity
    return RgbaImage(out)


def unsupported_features(doc: PsdDocument) -> list[str]:
    """Reasons this document falls outside the exactly-supported subset."""
    reasons = []
    for record in doc.layers:
        kind = "group" if record.is_divider else "layer"
        if record.is_divider:
            if record.section_type is SectionType.GROUP_CLOSE and (
                record.blend_mode not in _GROUP_BLEND_OK
            ):
                reasons.append(f"group {record.name!r}: blend mode {record.blend_mode!r}")
            continue
        if record.blend_mode != "norm":
            reasons.append(f"{kind} {record.name!r}: blend mode {record.blend_mode!r}")
        if record.has_mask:
            reasons.append(f"{kind} {record.name!r}: raster mask")
        if record.clipping:
            reasons.append(f"{kind} {record.name!r}: clipping mask")
        adjustment = ADJUSTMENT_KEYS.intersection(record.tagged_keys)
        if adjustment:
            reasons.append(f"{kind} {record.name!r}: adjustment layer {sorted(adjustment)}")
    return reasons


def flatten_layers(doc: PsdDocument) -> list[tuple[PsdLayerRecord, float, bool]]:
    """Flatten groups to (record, opacity_scale, visible) in bottom-to-top order.

    Group opacity multiplies into members; group visibility ANDs in.  Walks
    top-to-bottom because the folder record (carrying group attributes)
    closes the group in file order.
    """
    flat: list[tuple[PsdLayerRecord, float, bool]] = []
    group_stack: list[tuple[float, bool]] = []
    for record in reversed(doc.layers):
        if record.section_type is SectionType.GROUP_CLOSE:
            group_stack.append((record.opacity / 255.0, record.visible))
            continue
        if record.section_type is SectionType.GROUP_OPEN:
            if group_stack:
                group_stack.pop()
            continue
        scale = 1.0
        visible = record.visible
        for g_opacity, g_visible in group_stack:
            scale *= g_opacity
            visible = visible and g_visible
        flat.append((record, scale, visible))
    flat.reverse()
    return flat


def stack_from_document(doc: PsdDocument, *, strict: bool = True) -> LayerStack:
    """Convert a parsed document to a flat LayerStack.

    With ``strict`` (default) any unsupported feature raises
    ``UnsupportedFeature`` listing all reasons.
    """
    if strict:
        reasons = unsupported_features(doc)
        if reasons:
            raise UnsupportedFeature("; ".join(reasons))
    canvas = (doc.header.width, doc.header.height)
    layers = []
    for record, scale, visible in flatten_layers(doc):
        if not visible:
            layers.append(RgbaImage.transparent(*canvas))
            continue
        layers.append(layer_to_rgba(record, canvas, extra_opacity=scale))
    return LayerStack(canvas=canvas, layers=tuple(layers))
