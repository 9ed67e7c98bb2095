"""Token stream serialization and 16 kHz mono PCM WAV I/O.

Token file layout (all integers little-endian)::

    b"HTOK"  u16 version
    u32 sample_rate  u32 hop_samples  u16 num_codebooks M
    M x u32 codebook size K_i  u32 num_frames U  u32 crc32
    U x M x u16 codes, row-major, column 0 semantic

The CRC covers every header field before it plus the payload.
"""

from __future__ import annotations

import io
import struct
import wave
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .validation import SAMPLE_RATE, HASRDError, check_waveform

TOKEN_MAGIC = b"HTOK"
TOKEN_VERSION = 1
HOP_SAMPLES = 512
MAX_CODEBOOK = 65536


class TokenFormatError(HASRDError):
    code = "invalid"


class BadMagic(TokenFormatError):
    code = "bad_magic"


class UnsupportedVersion(TokenFormatError):
    code = "bad_version"


class UnexpectedEOF(TokenFormatError):
    code = "eof"


class InvalidHeader(TokenFormatError):
    code = "bad_header"


class TrailingBytes(TokenFormatError):
    code = "trailing"


class ChecksumMismatch(TokenFormatError):
    code = "checksum"


class CodeOutOfRange(TokenFormatError):
    code = "range"


@dataclass
class TokenStream:
    codes: np.ndarray  # (U, M) uint16
    codebook_sizes: tuple
    sample_rate: int = SAMPLE_RATE
    hop_samples: int = HOP_SAMPLES

    def __post_init__(self):
        self.codebook_sizes = tuple(int(k) for k in self.codebook_sizes)
        codes = np.asarray(self.codes)
        if codes.ndim != 2 or codes.shape[1] != len(self.codebook_sizes):
            raise InvalidHeader(
                f"codes must be (U, {len(self.codebook_sizes)}), got shape {codes.shape}"
            )
        self.codes = codes
        self.validate()

    @property
    def num_frames(self) -> int:
        return self.codes.shape[0]

    @property
    def num_codebooks(self) -> int:
        return len(self.codebook_sizes)

    def validate(self):
        if self.sample_rate != SAMPLE_RATE:
            raise InvalidHeader(f"sample rate {self.sample_rate} != {SAMPLE_RATE}")
        if self.hop_samples != HOP_SAMPLES:
            raise InvalidHeader(f"hop {self.hop_samples} != {HOP_SAMPLES}")
        if not self.codebook_sizes:
            raise InvalidHeader("need at least one codebook")
        for k in self.codebook_sizes:
            if not 2 <= k <= MAX_CODEBOOK:
                raise InvalidHeader(f"codebook size {k} outside [2, {MAX_CODEBOOK}]")
        if self.codes.size:
            if self.codes.min() < 0:
                raise CodeOutOfRange("negative code")
            bad = np.flatnonzero((self.codes >= np.asarray(self.codebook_sizes)).any(axis=0))
            if bad.size:
                raise CodeOutOfRange(f"code out of range in stream {int(bad[0])}")
        return self

    def __eq__(self, other):
        if not isinstance(other, TokenStream):
            return NotImplemented
        return (
            self.codebook_sizes == other.codebook_sizes
            and self.sample_rate == other.sample_rate
            and self.hop_samples == other.hop_samples
            and self.codes.shape == other.codes.shape
            and np.array_equal(self.codes, other.codes)
        )


def _header(t: TokenStream) -> bytes:
    m = t.num_codebooks
    return struct.pack(f"<IIH{m}II", t.sample_rate, t.hop_samples, m, *t.codebook_sizes, t.num_frames)


def tokens_to_bytes(t: TokenStream) -> bytes:
    t.validate()
    header = _header(t)
    payload = np.ascontiguousarray(t.codes, dtype="<u2").tobytes()
    crc = zlib.crc32(header + payload)
    return TOKEN_MAGIC + struct.pack("<H", TOKEN_VERSION) + header + struct.pack("<I", crc) + payload


def write_tokens(t: TokenStream, sink) -> int:
    data = tokens_to_bytes(t)
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)
    return len(data)


def _take(buf: bytes, pos: int, n: int) -> bytes:
    if pos + n > len(buf):
        raise UnexpectedEOF("unexpected EOF")
    return buf[pos : pos + n]


def tokens_from_bytes(buf: bytes) -> TokenStream:
    if _take(buf, 0, 4) != TOKEN_MAGIC:
        raise BadMagic("bad magic")
    (version,) = struct.unpack("<H", _take(buf, 4, 2))
    if version != TOKEN_VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    pos = 6
    sample_rate, hop, m = struct.unpack("<IIH", _take(buf, pos, 10))
    if m == 0:
        raise InvalidHeader("need at least one codebook")
    sizes = struct.unpack(f"<{m}I", _take(buf, pos + 10, 4 * m))
    (u,) = struct.unpack("<I", _take(buf, pos + 10 + 4 * m, 4))
    header_end = pos + 14 + 4 * m
    (crc,) = struct.unpack("<I", _take(buf, header_end, 4))
    payload_start = header_end + 4
    payload = _take(buf, payload_start, 2 * u * m)
    if len(buf) > payload_start + 2 * u * m:
        raise TrailingBytes(f"{len(buf) - payload_start - 2 * u * m} trailing bytes")
    if zlib.crc32(buf[pos:header_end] + payload) != crc:
        raise ChecksumMismatch("checksum mismatch")
    codes = np.frombuffer(payload, dtype="<u2").reshape(u, m).astype(np.uint16)
    return TokenStream(codes, sizes, sample_rate, hop)


def read_tokens(source) -> TokenStream:
    if isinstance(source, (str, Path)):
        return tokens_from_bytes(Path(source).read_bytes())
    return tokens_from_bytes(source.read())


def read_wav(source) -> np.ndarray:
    """Read 16 kHz mono 16-bit PCM; samples are scaled by 1/32768."""
    try:
        with wave.open(str(source) if isinstance(source, Path) else source, "rb") as w:
            if w.getnchannels() != 1:
                raise HASRDError(f"expected mono audio, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise HASRDError(f"expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            if w.getframerate() != SAMPLE_RATE:
                raise HASRDError(f"expected {SAMPLE_RATE} Hz audio, got {w.getframerate()} Hz")
            data = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise HASRDError(f"not a PCM WAV file: {e}") from e
    return np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0


def pcm16(samples) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(sink, samples) -> int:
    """Write 16 kHz mono 16-bit PCM; returns the number of bytes written."""
    x = check_waveform(samples, min_samples=0)
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm16(x).tobytes())
    data = buf.getvalue()
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)
    return len(data)
