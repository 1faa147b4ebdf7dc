"""Little-endian binary containers shared by the file formats.

All formats start with an 8-byte magic string, followed by u32 LE integers and
f32 LE payloads.
"""

import struct

import numpy as np

from .errors import FormatError

F32 = np.dtype("<f4")


def write_u32(fh, *values):
    fh.write(struct.pack("<%dI" % len(values), *values))


def read_u32(fh, count=1):
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError("truncated header")
    return struct.unpack("<%dI" % count, raw)


def write_f32(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype=F32).tobytes())


def read_f32(fh, count):
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError("truncated payload: expected %d floats" % count)
    return np.frombuffer(raw, dtype=F32).astype(np.float64)


def expect_magic(fh, magic):
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError("wrong magic: expected %r, got %r" % (magic, got))


def expect_eof(fh):
    if fh.read(1):
        raise FormatError("trailing bytes after payload")
