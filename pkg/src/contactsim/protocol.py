"""Binary wire format for live state streaming and steering commands.

Every message is a 4-byte unsigned little-endian length prefix (counting the
bytes that follow it) and then a payload whose first byte is the type tag.
All integers and floats are little-endian; floats are 64-bit.

Tag 0x00, handshake (both directions, 3 bytes):
    u8 tag, u8 version, u8 flag
    Client to server the flag asks for steering; server to client it grants
    the role (1 steerer, 0 observer).

Tag 0x01, state (server to clients, 126 + 48 m bytes):
    u8 tag, u64 frame id, f64 sim time,
    f64[7] pose (px py pz qw qx qy qz),
    u32 contact count m, then per contact f64[3] point and f64[3] normal,
    f64[6] contact wrench (force then torque), u8 converged (0 or 1)

Tag 0x02, command (steering client to server, 65 bytes):
    u8 tag, f64[6] coupling-target delta (dx dy dz rx ry rz),
    f64 screw rate (rad/s), f64 client timestamp

Tag 0x03, error (server to client before closing, 9 + n bytes):
    u8 tag, u32 code, u32 n, then n bytes of UTF-8 text
"""

import struct
from dataclasses import dataclass, field

import numpy as np

VERSION = 1

TAG_HANDSHAKE = 0x00
TAG_STATE = 0x01
TAG_COMMAND = 0x02
TAG_ERROR = 0x03

ROLE_OBSERVER = 0
ROLE_STEERER = 1

ERR_VERSION = 1
ERR_MALFORMED = 2
ERR_ROLE = 3

MAX_TRANSLATION = 5e-3
MAX_ROTATION = 0.05

# sanity bound on the decoded contact count; real frames carry at most m_c
MAX_CONTACTS = 65535

_F8 = np.dtype("<f8")


class ProtocolError(ValueError):
    """Raised when bytes do not parse as a well-formed message."""


@dataclass(eq=False)
class Hello:
    version: int = VERSION
    want_steer: bool = False


@dataclass(eq=False)
class Welcome:
    version: int = VERSION
    role: int = ROLE_OBSERVER


@dataclass(eq=False)
class StateFrame:
    frame_id: int
    time: float
    pose: np.ndarray
    contact_points: np.ndarray
    contact_normals: np.ndarray
    wrench: np.ndarray
    converged: bool

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float).reshape(7)
        self.contact_points = np.asarray(self.contact_points, dtype=float).reshape(-1, 3)
        self.contact_normals = np.asarray(self.contact_normals, dtype=float).reshape(-1, 3)
        if len(self.contact_points) != len(self.contact_normals):
            raise ValueError("point and normal counts differ")
        self.wrench = np.asarray(self.wrench, dtype=float).reshape(6)


@dataclass(eq=False)
class CommandFrame:
    delta: np.ndarray = field(default_factory=lambda: np.zeros(6))
    screw_rate: float = 0.0
    timestamp: float = 0.0

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float).reshape(6)


@dataclass(eq=False)
class ErrorFrame:
    code: int
    message: str = ""


def _pack(payload):
    return struct.pack("<I", len(payload)) + payload


def encode_hello(msg):
    return _pack(struct.pack("<BBB", TAG_HANDSHAKE, msg.version, 1 if msg.want_steer else 0))


def encode_welcome(msg):
    return _pack(struct.pack("<BBB", TAG_HANDSHAKE, msg.version, msg.role))


def encode_state(msg):
    m = len(msg.contact_points)
    body = bytearray()
    body += struct.pack("<BQd", TAG_STATE, msg.frame_id, msg.time)
    body += msg.pose.astype(_F8).tobytes()
    body += struct.pack("<I", m)
    if m:
        interleaved = np.hstack([msg.contact_points, msg.contact_normals]).astype(_F8)
        body += interleaved.tobytes()
    body += msg.wrench.astype(_F8).tobytes()
    body += struct.pack("<B", 1 if msg.converged else 0)
    return _pack(bytes(body))


def encode_command(msg):
    return _pack(
        struct.pack("<B", TAG_COMMAND)
        + msg.delta.astype(_F8).tobytes()
        + struct.pack("<dd", msg.screw_rate, msg.timestamp)
    )


def encode_error(msg):
    text = msg.message.encode("utf-8")
    return _pack(struct.pack("<BII", TAG_ERROR, msg.code, len(text)) + text)


def encode(msg):
    if isinstance(msg, Hello):
        return encode_hello(msg)
    if isinstance(msg, Welcome):
        return encode_welcome(msg)
    if isinstance(msg, StateFrame):
        return encode_state(msg)
    if isinstance(msg, CommandFrame):
        return encode_command(msg)
    if isinstance(msg, ErrorFrame):
        return encode_error(msg)
    raise TypeError(f"cannot encode {type(msg).__name__}")


class _Reader:
    """Bounds-checked cursor over one payload."""

    def __init__(self, data):
        self.data = data
        self.at = 0

    def take(self, n):
        if self.at + n > len(self.data):
            raise ProtocolError("message truncated")
        out = self.data[self.at : self.at + n]
        self.at += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n):
        return np.frombuffer(self.take(8 * n), dtype=_F8).astype(float)

    def done(self):
        if self.at != len(self.data):
            raise ProtocolError(f"{len(self.data) - self.at} trailing bytes")


def _decode_payload(payload):
    if not payload:
        raise ProtocolError("empty message")
    r = _Reader(payload)
    (tag,) = r.unpack("<B")
    if tag == TAG_HANDSHAKE:
        version, flag = r.unpack("<BB")
        r.done()
        # caller picks Hello/Welcome by direction; flag carries both meanings
        return Hello(version, bool(flag)), Welcome(version, flag)
    if tag == TAG_STATE:
        frame_id, t = r.unpack("<Qd")
        pose = r.floats(7)
        (m,) = r.unpack("<I")
        if m > MAX_CONTACTS:
            raise ProtocolError(f"contact count {m} out of range")
        pn = r.floats(6 * m).reshape(m, 6)
        wrench = r.floats(6)
        (conv,) = r.unpack("<B")
        if conv not in (0, 1):
            raise ProtocolError(f"converged byte {conv} not 0 or 1")
        r.done()
        return StateFrame(frame_id, t, pose, pn[:, :3], pn[:, 3:], wrench, bool(conv))
    if tag == TAG_COMMAND:
        delta = r.floats(6)
        rate, ts = r.unpack("<dd")
        r.done()
        return CommandFrame(delta, rate, ts)
    if tag == TAG_ERROR:
        code, n = r.unpack("<II")
        text = r.take(n)
        r.done()
        try:
            message = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError("error text is not UTF-8") from e
        return ErrorFrame(code, message)
    raise ProtocolError(f"unknown tag 0x{tag:02x}")


def decode(data, *, from_server=False):
    """Decode one length-prefixed message.

    Handshake bytes are direction-ambiguous; from_server picks Welcome over
    Hello."""
    if len(data) < 4:
        raise ProtocolError("message shorter than its length prefix")
    (n,) = struct.unpack("<I", data[:4])
    if n != len(data) - 4:
        raise ProtocolError(f"length prefix {n} does not match body {len(data) - 4}")
    out = _decode_payload(bytes(data[4:]))
    if isinstance(out, tuple):
        return out[1] if from_server else out[0]
    return out


def split_stream(buffer):
    """Split a byte stream into complete messages plus the unconsumed tail.

    For transports without message boundaries; each returned element is a
    full length-prefixed message ready for decode()."""
    buffer = bytes(buffer)
    out = []
    at = 0
    while len(buffer) - at >= 4:
        (n,) = struct.unpack("<I", buffer[at : at + 4])
        if len(buffer) - at - 4 < n:
            break
        out.append(buffer[at : at + 4 + n])
        at += 4 + n
    return out, buffer[at:]


def clamp_command(cmd, max_translation=MAX_TRANSLATION, max_rotation=MAX_ROTATION):
    """Scale per-frame target deltas down to the protocol limits."""
    delta = cmd.delta.copy()
    tn = float(np.linalg.norm(delta[:3]))
    if tn > max_translation:
        delta[:3] *= max_translation / tn
    rn = float(np.linalg.norm(delta[3:]))
    if rn > max_rotation:
        delta[3:] *= max_rotation / rn
    return CommandFrame(delta, cmd.screw_rate, cmd.timestamp)
