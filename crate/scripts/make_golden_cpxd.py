"""Writes the .cpxd golden vectors used by crates/core/tests/bitstream_golden.rs."""
import struct
import sys
import zlib
from pathlib import Path


def pack(bits, real, imag, sample_rate, hop, fft, n_samples, indices):
    header = b"CPXD" + struct.pack(
        "<BBBBIIIIQ", 1, bits, real, imag, sample_rate, hop, fft, len(indices), n_samples
    )
    payload = bytearray()
    for frame in indices:
        acc = 0
        for idx in frame:
            acc = (acc << bits) | idx
        nbits = len(frame) * bits
        nbytes = (nbits + 7) // 8
        acc <<= nbytes * 8 - nbits
        payload += acc.to_bytes(nbytes, "big")
    return header + bytes(payload) + struct.pack("<I", zlib.crc32(payload))


def pattern(frames, stages, bits):
    return [[(t * 97 + s * 131 + 7) % (1 << bits) for s in range(stages)] for t in range(frames)]


out = Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/data")
out.mkdir(parents=True, exist_ok=True)
(out / "default_3frames.cpxd").write_bytes(
    pack(10, 8, 8, 48000, 320, 510, 800, pattern(3, 16, 10))
)
(out / "odd_5bit_4frames.cpxd").write_bytes(
    pack(5, 3, 2, 44100, 256, 1024, 1000, pattern(4, 5, 5))
)
