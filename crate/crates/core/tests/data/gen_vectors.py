#!/usr/bin/env python3
"""Regenerates the golden vectors in this directory.

Deliberately naive: bit-serial CRC, carry-less GF(2^8) multiplication and
schoolbook polynomial division, so nothing is shared with the Rust code.
"""

import random

FIELD_POLY = 0x11D
PARITY = 16


def crc16(data: bytes) -> int:
    reg = 0xFFFF
    for byte in data:
        for bit in range(7, -1, -1):
            top = (reg >> 15) & 1
            reg = (reg << 1) & 0xFFFF
            if top ^ ((byte >> bit) & 1):
                reg ^= 0x1021
    return reg


def gf_mul(a: int, b: int) -> int:
    r = 0
    while b:
        if b & 1:
            r ^= a
        b >>= 1
        a <<= 1
        if a & 0x100:
            a ^= FIELD_POLY
    return r


def generator() -> list[int]:
    g = [1]
    root = 1
    for _ in range(PARITY):
        # multiply by (x + root), coefficients highest degree first
        nxt = g + [0]
        for j, c in enumerate(g):
            nxt[j + 1] ^= gf_mul(c, root)
        g = nxt
        root = gf_mul(root, 2)
    return g


def rs_parity(data: bytes) -> bytes:
    g = generator()
    rem = list(data) + [0] * PARITY
    for i in range(len(data)):
        lead = rem[i]
        if lead:
            for j, c in enumerate(g):
                rem[i + j] ^= gf_mul(c, lead)
    return bytes(rem[len(data):])


def serialize(dst: int, src: int, proto: int, payload: bytes) -> bytes:
    head = len(payload).to_bytes(2, "big") + dst.to_bytes(2, "big") + src.to_bytes(2, "big") + proto.to_bytes(2, "big")
    body = head + payload
    return body + crc16(body).to_bytes(2, "big")


def coded(serialized: bytes) -> bytes:
    out = b""
    for i in range(0, len(serialized), 200):
        block = serialized[i : i + 200]
        out += block + rs_parity(block)
    return out


def main() -> None:
    rng = random.Random(20140701)
    with open("crc16_vectors.txt", "w") as f:
        f.write("# input_hex crc_hex\n")
        for data in [b"", b"123456789", b"\x00", b"\xff" * 4]:
            f.write(f"{data.hex() or '-'} {crc16(data):04x}\n")
        for n in [1, 2, 7, 64, 200, 1510]:
            data = bytes(rng.randrange(256) for _ in range(n))
            f.write(f"{data.hex()} {crc16(data):04x}\n")
    with open("rs_vectors.txt", "w") as f:
        f.write("# data_hex parity_hex\n")
        for data in [b"\x01", b"\x00" * 10, bytes(range(200))]:
            f.write(f"{data.hex()} {rs_parity(data).hex()}\n")
        for n in [1, 2, 10, 26, 100, 199, 200]:
            data = bytes(rng.randrange(256) for _ in range(n))
            f.write(f"{data.hex()} {rs_parity(data).hex()}\n")
    with open("frame_vectors.txt", "w") as f:
        f.write("# dst src protocol payload_hex coded_hex\n")
        for n in [0, 1, 50, 190, 191, 400, 1500]:
            payload = bytes(rng.randrange(256) for _ in range(n))
            dst, src, proto = 0x0002, 0x0001, 0x0800 if n else 0x0000
            c = coded(serialize(dst, src, proto, payload))
            f.write(f"{dst:04x} {src:04x} {proto:04x} {payload.hex() or '-'} {c.hex()}\n")


if __name__ == "__main__":
    main()
