"""Wire format: round-trips, byte-level layout, clamping, malformed input."""

import struct

import numpy as np
import pytest

from contactsim import protocol as P


def state_frame(m=3, frame_id=42, seed=0):
    rng = np.random.default_rng(seed)
    return P.StateFrame(
        frame_id=frame_id,
        time=1.25,
        pose=rng.normal(size=7),
        contact_points=rng.normal(size=(m, 3)),
        contact_normals=rng.normal(size=(m, 3)),
        wrench=rng.normal(size=6),
        converged=True,
    )


class TestRoundTrip:
    def test_state_with_contacts(self):
        frame = state_frame(m=12)
        back = P.decode(P.encode(frame))
        assert back.frame_id == frame.frame_id
        assert back.time == frame.time
        assert np.array_equal(back.pose, frame.pose)
        assert np.array_equal(back.contact_points, frame.contact_points)
        assert np.array_equal(back.contact_normals, frame.contact_normals)
        assert np.array_equal(back.wrench, frame.wrench)
        assert back.converged is True

    def test_state_without_contacts(self):
        frame = state_frame(m=0)
        frame.converged = False
        back = P.decode(P.encode(frame))
        assert back.contact_points.shape == (0, 3)
        assert back.converged is False

    def test_command(self):
        cmd = P.CommandFrame(np.arange(6) * 1e-4, screw_rate=-1.5, timestamp=99.5)
        back = P.decode(P.encode(cmd))
        assert np.array_equal(back.delta, cmd.delta)
        assert back.screw_rate == -1.5
        assert back.timestamp == 99.5

    def test_handshake_both_directions(self):
        hello = P.decode(P.encode(P.Hello(want_steer=True)))
        assert isinstance(hello, P.Hello)
        assert hello.version == P.VERSION and hello.want_steer

        welcome = P.decode(P.encode(P.Welcome(role=P.ROLE_STEERER)), from_server=True)
        assert isinstance(welcome, P.Welcome)
        assert welcome.role == P.ROLE_STEERER

    def test_error(self):
        back = P.decode(P.encode(P.ErrorFrame(P.ERR_ROLE, "observers are read-only")))
        assert back.code == P.ERR_ROLE
        assert back.message == "observers are read-only"


class TestByteLayout:
    def test_command_bytes_are_the_documented_layout(self):
        delta = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        data = P.encode(P.CommandFrame(delta, screw_rate=7.0, timestamp=8.0))
        expected = struct.pack("<IB8d", 65, 0x02, *delta, 7.0, 8.0)
        assert data == expected

    def test_state_size_formula(self):
        for m in (0, 1, 12):
            assert len(P.encode(state_frame(m=m))) == 4 + 126 + 48 * m

    def test_contact_rows_interleave_point_then_normal(self):
        frame = state_frame(m=1)
        data = P.encode(frame)
        floats = np.frombuffer(data[4 + 1 + 8 + 8 + 56 + 4 :][: 6 * 8], dtype="<f8")
        assert np.array_equal(floats[:3], frame.contact_points[0])
        assert np.array_equal(floats[3:], frame.contact_normals[0])


class TestClamping:
    def test_within_limits_is_untouched(self):
        cmd = P.CommandFrame(np.array([1e-3, 0, 0, 0.01, 0, 0]), 2.0, 1.0)
        out = P.clamp_command(cmd)
        assert np.array_equal(out.delta, cmd.delta)
        assert out.screw_rate == 2.0

    def test_oversized_deltas_scale_to_the_limit(self):
        cmd = P.CommandFrame(np.array([0.3, 0.4, 0.0, 0.3, 0.0, 0.4]), 0.0, 0.0)
        out = P.clamp_command(cmd)
        assert np.linalg.norm(out.delta[:3]) == pytest.approx(P.MAX_TRANSLATION)
        assert np.linalg.norm(out.delta[3:]) == pytest.approx(P.MAX_ROTATION)
        # direction preserved
        assert np.allclose(out.delta[:3] / np.linalg.norm(out.delta[:3]), [0.6, 0.8, 0.0])

    def test_axes_clamp_independently(self):
        cmd = P.CommandFrame(np.array([1.0, 0, 0, 0, 0, 1e-3]), 0.0, 0.0)
        out = P.clamp_command(cmd)
        assert np.linalg.norm(out.delta[:3]) == pytest.approx(P.MAX_TRANSLATION)
        assert out.delta[5] == 1e-3


class TestMalformed:
    def test_unknown_tag(self):
        with pytest.raises(P.ProtocolError, match="tag"):
            P.decode(struct.pack("<IB", 1, 0x7F))

    def test_truncated_payload(self):
        good = P.encode(P.CommandFrame())
        bad = good[:20]
        with pytest.raises(P.ProtocolError):
            P.decode(bad)

    def test_length_prefix_mismatch(self):
        good = bytearray(P.encode(P.CommandFrame()))
        good[0] += 1
        with pytest.raises(P.ProtocolError, match="length prefix"):
            P.decode(bytes(good))

    def test_trailing_bytes(self):
        payload = struct.pack("<BBB", P.TAG_HANDSHAKE, P.VERSION, 0) + b"x"
        with pytest.raises(P.ProtocolError, match="trailing"):
            P.decode(struct.pack("<I", len(payload)) + payload)

    def test_absurd_contact_count(self):
        payload = struct.pack("<BQd", P.TAG_STATE, 1, 0.0)
        payload += np.zeros(7).tobytes()
        payload += struct.pack("<I", 2**31)
        with pytest.raises(P.ProtocolError, match="contact count"):
            P.decode(struct.pack("<I", len(payload)) + payload)

    def test_bad_converged_byte(self):
        data = bytearray(P.encode(state_frame(m=0)))
        data[-1] = 7
        with pytest.raises(P.ProtocolError, match="converged"):
            P.decode(bytes(data))

    def test_short_buffer(self):
        with pytest.raises(P.ProtocolError):
            P.decode(b"\x01\x00")


class TestStreamSplitting:
    def test_reassembles_messages_fed_in_arbitrary_chunks(self):
        messages = [
            P.encode(P.CommandFrame(np.ones(6) * 1e-4, 1.0, k)) for k in range(3)
        ]
        blob = b"".join(messages)
        got = []
        buf = b""
        for cut in range(0, len(blob), 7):
            buf += blob[cut : cut + 7]
            done, buf = P.split_stream(buf)
            got.extend(done)
        done, buf = P.split_stream(buf)
        got.extend(done)
        assert got == messages
        assert buf == b""

    def test_partial_message_stays_buffered(self):
        msg = P.encode(P.CommandFrame())
        done, rest = P.split_stream(msg[:10])
        assert done == [] and rest == msg[:10]
