"""Intra-only block codec with a per-macroblock QP map.

Frames are ``(C, H, W)`` float arrays in [0, 1] with ``H`` and ``W``
multiples of 16.  Each 16x16 macroblock is split per channel into four 8x8
sub-blocks, transformed with an orthonormal 2-D DCT-II on the 0..255 scale,
divided by the block's quantizer step and rounded half away from zero.

Bitstream (``AGV1``, little-endian)::

    magic "AGV1" | width u16 | height u16 | channels u8 | block u8 (16)
    QP map, w*h bytes, row-major
    payload length u32
    payload: for each macroblock (row-major), each channel, each 8x8
             sub-block (row-major): (run u8, level i16) pairs in zigzag
             order, terminated by 0xFF
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn

MB = 16
SUB = 8
EOB = 0xFF
MAGIC = b"AGV1"
HEADER = struct.Struct("<4sHHBB")
BACKGROUND_RGB = (123.675, 116.28, 103.53)


class CodecError(ValueError):
    pass


class BitstreamError(CodecError):
    """Malformed stream; ``offset`` is the byte position of the problem."""

    def __init__(self, msg, offset):
        super().__init__(f"{msg} at byte {offset}")
        self.offset = offset


def quant_step(qp):
    """H.264-like step: doubles every 6 QP, floored at 1, snapped to 1/16."""
    if not 0 <= qp <= 51:
        raise CodecError(f"QP {qp} outside [0, 51]")
    return round(max(1.0, 2.0 ** ((qp - 4) / 6.0)) * 16) / 16


STEP_TABLE = tuple(quant_step(q) for q in range(52))


def _zigzag(n=SUB):
    order = sorted(((r, c) for r in range(n) for c in range(n)),
                   key=lambda rc: (rc[0] + rc[1], rc[1] if (rc[0] + rc[1]) % 2 == 0 else rc[0]))
    return np.array([r * n + c for r, c in order])


ZIGZAG = _zigzag()


@dataclass
class CodecConfig:
    background: tuple = field(default_factory=lambda: tuple(v / 255 for v in BACKGROUND_RGB))

    def background_for(self, channels):
        if channels == len(self.background):
            return np.array(self.background)
        return np.full(channels, float(np.mean(self.background)))


@dataclass
class EncodedFrame:
    width: int
    height: int
    channels: int
    qpmap: np.ndarray
    payload: bytes

    def to_bytes(self):
        head = HEADER.pack(MAGIC, self.width, self.height, self.channels, MB)
        qp = np.asarray(self.qpmap, dtype=np.uint8).tobytes()
        return head + qp + struct.pack("<I", len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, data, offset=0):
        """Parse one frame starting at ``offset``; returns (frame, end offset)."""
        if len(data) - offset < HEADER.size:
            raise BitstreamError("truncated header", len(data))
        magic, width, height, channels, block = HEADER.unpack_from(data, offset)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}", offset)
        if block != MB:
            raise BitstreamError(f"unsupported block size {block}", offset + 9)
        if width % MB or height % MB:
            raise BitstreamError("frame dims not multiples of 16", offset + 4)
        pos = offset + HEADER.size
        nblocks = (width // MB) * (height // MB)
        if len(data) - pos < nblocks + 4:
            raise BitstreamError("truncated QP map", len(data))
        qpmap = np.frombuffer(data, dtype=np.uint8, count=nblocks, offset=pos)
        qpmap = qpmap.reshape(height // MB, width // MB).astype(np.int64)
        if qpmap.size and qpmap.max() > 51:
            raise BitstreamError("QP above 51 in map", pos + int(np.argmax(qpmap.ravel())))
        pos += nblocks
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if len(data) - pos < length:
            raise BitstreamError("truncated payload", len(data))
        payload = bytes(data[pos:pos + length])
        return cls(width, height, channels, qpmap, payload), pos + length


def frame_size(enc):
    """Exact serialized length in bytes."""
    return HEADER.size + enc.qpmap.size + 4 + len(enc.payload)


def _sub_blocks(frame):
    """(C, H, W) -> (hb, wb, C, 4, 8, 8) on the 0..255 scale."""
    c, h, w = frame.shape
    x = frame.reshape(c, h // MB, 2, SUB, w // MB, 2, SUB) * 255.0
    return x.transpose(1, 4, 0, 2, 5, 3, 6).reshape(h // MB, w // MB, c, 4, SUB, SUB)


def _from_sub_blocks(blocks):
    hb, wb, c = blocks.shape[:3]
    x = blocks.reshape(hb, wb, c, 2, 2, SUB, SUB).transpose(2, 0, 3, 5, 1, 4, 6)
    return x.reshape(c, hb * MB, wb * MB) / 255.0


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def check_frame(frame):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3:
        raise CodecError(f"frame must be (C, H, W), got shape {frame.shape}")
    if frame.shape[1] % MB or frame.shape[2] % MB:
        raise CodecError(f"frame dims {frame.shape[1:]} are not multiples of {MB}; pad first")
    return frame


def quantize(frame, qpmap):
    """Quantized DCT levels, shape (hb, wb, C, 4, 64) in zigzag order."""
    frame = check_frame(frame)
    qpmap = np.asarray(qpmap)
    grid = (frame.shape[1] // MB, frame.shape[2] // MB)
    if qpmap.shape != grid:
        raise CodecError(f"QP map shape {qpmap.shape} does not match block grid {grid}")
    if qpmap.size and (qpmap.min() < 0 or qpmap.max() > 51):
        raise CodecError("QP map values must lie in [0, 51]")
    coef = dctn(_sub_blocks(frame), type=2, norm="ortho", axes=(-2, -1))
    steps = np.array(STEP_TABLE)[qpmap.astype(np.int64)]
    levels = _round_half_away(coef / steps[:, :, None, None, None, None])
    levels = np.clip(levels, -32768, 32767).astype(np.int64)
    return levels.reshape(levels.shape[:4] + (SUB * SUB,))[..., ZIGZAG]


def dequantize(levels, qpmap, channels):
    hb, wb = qpmap.shape
    coef = np.zeros(levels.shape, dtype=np.float64)
    coef[..., ZIGZAG] = levels
    steps = np.array(STEP_TABLE)[qpmap]
    coef = coef.reshape(hb, wb, channels, 4, SUB, SUB) * steps[:, :, None, None, None, None]
    pixels = idctn(coef, type=2, norm="ortho", axes=(-2, -1))
    return np.clip(_from_sub_blocks(pixels), 0.0, 1.0)


def pack_levels(levels):
    flat = levels.reshape(-1, SUB * SUB)
    nblocks = flat.shape[0]
    rows, cols = np.nonzero(flat)
    prev = np.empty_like(cols)
    prev[:1] = -1
    prev[1:] = np.where(rows[1:] == rows[:-1], cols[:-1], -1)
    runs = cols - prev - 1
    vals = flat[rows, cols].astype("<i2").view(np.uint8).reshape(-1, 2)
    per_block = np.bincount(rows, minlength=nblocks)
    out = np.empty(3 * len(rows) + nblocks, dtype=np.uint8)
    start = 3 * np.arange(len(rows)) + rows
    out[start] = runs
    out[start + 1] = vals[:, 0]
    out[start + 2] = vals[:, 1]
    out[3 * np.cumsum(per_block) + np.arange(nblocks)] = EOB
    return out.tobytes()


def unpack_levels(payload, nsub, base_offset=0):
    levels = np.zeros((nsub, SUB * SUB), dtype=np.int64)
    pos = 0
    for b in range(nsub):
        k = 0
        while True:
            if pos >= len(payload):
                raise BitstreamError("truncated payload", base_offset + pos)
            run = payload[pos]
            if run == EOB:
                pos += 1
                break
            if pos + 3 > len(payload):
                raise BitstreamError("truncated run/level pair", base_offset + pos)
            k += run
            if k >= SUB * SUB:
                raise BitstreamError("run overflows sub-block", base_offset + pos)
            (levels[b, k],) = struct.unpack_from("<h", payload, pos + 1)
            k += 1
            pos += 3
    if pos != len(payload):
        raise BitstreamError("trailing bytes after last sub-block", base_offset + pos)
    return levels


def encode_frame(frame, qpmap, cfg=None):
    frame = check_frame(frame)
    levels = quantize(frame, qpmap)
    c, h, w = frame.shape
    return EncodedFrame(w, h, c, np.asarray(qpmap, dtype=np.int64).copy(), pack_levels(levels))


def decode_levels(enc):
    hb, wb = enc.qpmap.shape
    nsub = hb * wb * enc.channels * 4
    offset = HEADER.size + enc.qpmap.size + 4
    levels = unpack_levels(enc.payload, nsub, offset)
    return levels.reshape(hb, wb, enc.channels, 4, SUB * SUB)


def decode_frame(enc, cfg=None):
    if isinstance(enc, (bytes, bytearray, memoryview)):
        enc, end = EncodedFrame.from_bytes(bytes(enc))
    levels = decode_levels(enc)
    if enc.qpmap.size == 0:
        return np.zeros((enc.channels, enc.height, enc.width))
    return dequantize(levels, enc.qpmap, enc.channels)


def uniform_qpmap(frame, qp):
    frame = np.asarray(frame)
    return np.full((frame.shape[1] // MB, frame.shape[2] // MB), int(qp), dtype=np.int64)


def mask_to_qpmap(mask, qp_hi=30, qp_lo=40):
    if not (0 <= qp_hi <= 51 and 0 <= qp_lo <= 51):
        raise CodecError(f"QPs ({qp_hi}, {qp_lo}) outside [0, 51]")
    if qp_hi > qp_lo:
        raise CodecError(f"high-quality QP {qp_hi} exceeds low-quality QP {qp_lo}")
    return np.where(np.asarray(mask, dtype=bool), qp_hi, qp_lo).astype(np.int64)


def expand_mask(mask, block=MB):
    """Block grid -> pixel grid."""
    return np.kron(np.asarray(mask, dtype=np.float64), np.ones((block, block)))


def replace_background(frame, mask, cfg=None):
    cfg = cfg or CodecConfig()
    frame = check_frame(frame)
    keep = expand_mask(mask)[None]
    color = cfg.background_for(frame.shape[0])[:, None, None]
    return keep * frame + (1.0 - keep) * color


def encode_uniform_background(frame, mask, cfg=None, qp_hi=30):
    """Blank unselected macroblocks to the background color, then encode at ``qp_hi``."""
    blanked = replace_background(frame, mask, cfg)
    return encode_frame(blanked, uniform_qpmap(blanked, qp_hi), cfg)


def pack_chunk(frames):
    """Chunk container: u32 count followed by serialized AGV1 frames."""
    return struct.pack("<I", len(frames)) + b"".join(f.to_bytes() for f in frames)


def unpack_chunk(data):
    if len(data) < 4:
        raise BitstreamError("truncated chunk count", len(data))
    (count,) = struct.unpack_from("<I", data, 0)
    pos = 4
    frames = []
    for _ in range(count):
        enc, pos = EncodedFrame.from_bytes(data, pos)
        frames.append(enc)
    if pos != len(data):
        raise BitstreamError("trailing bytes after last frame", pos)
    return frames


def qpmap_sidecar(qpmap):
    """Export text: one ``bx by qp`` line per macroblock."""
    rows = []
    for by, bx in np.ndindex(qpmap.shape):
        rows.append(f"{bx} {by} {int(qpmap[by, bx])}")
    return "\n".join(rows) + "\n"
