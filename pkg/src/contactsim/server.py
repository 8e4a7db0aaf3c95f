"""Live scenario streaming over WebSocket with a steered coupling target.

The stepping loop owns the world exclusively.  The network side only fills a
single latest-command slot (so commands arriving within one step collapse to
the newest) and drains per-client snapshot queues; a reader that falls behind
loses frames instead of stalling the simulation.

One client holds the steering role, granted to the first connection that
asks for it; everyone else observes.  The scenario's own command profile is
ignored while serving: the coupling target starts parked at the scenario
start and moves only on steering input.  When the steering client leaves,
the target freezes where it is and the screw rate drops to zero.
"""

import asyncio
import contextlib
import logging

import numpy as np
from websockets.asyncio.server import serve as ws_serve
from websockets.exceptions import ConnectionClosed

from .protocol import (
    ERR_MALFORMED,
    ERR_ROLE,
    ERR_VERSION,
    ROLE_OBSERVER,
    ROLE_STEERER,
    VERSION,
    CommandFrame,
    ErrorFrame,
    Hello,
    ProtocolError,
    StateFrame,
    Welcome,
    clamp_command,
    decode,
    encode_error,
    encode_state,
    encode_welcome,
)
from .runner import build_world, step_world
from .spatial import Pose, Twist, quat_from_rotvec, quat_mul, quat_normalize

log = logging.getLogger(__name__)

QUEUE_DEPTH = 8
HANDSHAKE_TIMEOUT = 5.0
CLOSE_PROTOCOL_ERROR = 1002


class _Client:
    def __init__(self, conn, role, depth):
        self.conn = conn
        self.role = role
        self.queue = asyncio.Queue(maxsize=depth)
        self.dropped = 0


class StreamServer:
    """Steps one scenario in real time and broadcasts state snapshots."""

    def __init__(self, cfg, host="127.0.0.1", port=0, divisor=1, realtime=True,
                 queue_depth=QUEUE_DEPTH):
        if cfg.mode == "ball_slab":
            raise ValueError("scenario has no command handle to steer")
        if divisor < 1:
            raise ValueError("divisor must be at least 1")
        self.cfg = cfg
        self.host = host
        self.requested_port = port
        self.divisor = divisor
        self.realtime = realtime
        self.queue_depth = queue_depth
        self.world = build_world(cfg)
        self.port = None

        self._target_pose = Pose(cfg.start.copy(), np.array([1.0, 0.0, 0.0, 0.0]))
        self._screw_rate = 0.0
        self._latest = None
        self._clients = set()
        self._steerer = None
        self._frame_id = 0
        self._stopping = None
        self._server = None
        self._step_task = None

    @property
    def target_pose(self):
        return self._target_pose

    @property
    def screw_rate(self):
        return self._screw_rate

    async def start(self):
        self._stopping = asyncio.Event()
        self._server = await ws_serve(
            self._handler, self.host, self.requested_port, max_size=2**20
        )
        self.port = self._server.sockets[0].getsockname()[1]
        self._step_task = asyncio.create_task(self._step_loop())
        log.info("streaming on %s:%d", self.host, self.port)

    async def stop(self):
        self._stopping.set()
        with contextlib.suppress(asyncio.CancelledError):
            await self._step_task
        self._server.close()
        await self._server.wait_closed()

    @contextlib.asynccontextmanager
    async def running(self):
        await self.start()
        try:
            yield self
        finally:
            await self.stop()

    def _consume_command(self):
        cmd = self._latest
        self._latest = None
        if cmd is None:
            return
        cmd = clamp_command(cmd)
        self._target_pose = Pose(
            self._target_pose.position + cmd.delta[:3],
            quat_normalize(
                quat_mul(quat_from_rotvec(cmd.delta[3:]), self._target_pose.quaternion)
            ),
        )
        self._screw_rate = float(cmd.screw_rate)

    def _advance_handle(self, dt):
        if self._screw_rate:
            self._target_pose = Pose(
                self._target_pose.position,
                quat_normalize(
                    quat_mul(
                        quat_from_rotvec([0.0, 0.0, self._screw_rate * dt]),
                        self._target_pose.quaternion,
                    )
                ),
            )
        return self._target_pose, Twist(np.zeros(3), np.array([0.0, 0.0, self._screw_rate]))

    def step_once(self):
        """One owned step: consume the slot, move the handle, step, snapshot."""
        self._consume_command()
        handle = self._advance_handle(self.cfg.dt)
        rec = step_world(self.world, handle=handle)[0]
        if rec.step % self.divisor:
            return None
        self._frame_id += 1
        points, normals = self.world.last_contacts[0]
        return encode_state(
            StateFrame(
                self._frame_id, rec.time, rec.pose, points, normals, rec.wrench,
                rec.converged,
            )
        )

    def _broadcast(self, data):
        for client in self._clients:
            try:
                client.queue.put_nowait(data)
            except asyncio.QueueFull:
                client.dropped += 1

    async def _step_loop(self):
        loop = asyncio.get_running_loop()
        dt = self.cfg.dt
        next_t = loop.time()
        while not self._stopping.is_set():
            data = self.step_once()
            if data is not None:
                self._broadcast(data)
            if self.realtime:
                next_t += dt
                delay = next_t - loop.time()
                if delay > 0:
                    await asyncio.sleep(delay)
                else:
                    # behind schedule; reset the deadline instead of bursting
                    next_t = loop.time()
                    await asyncio.sleep(0)
            else:
                await asyncio.sleep(0)

    async def _send_loop(self, client):
        with contextlib.suppress(ConnectionClosed):
            while True:
                await client.conn.send(await client.queue.get())

    async def _close_with_error(self, conn, code, message):
        with contextlib.suppress(ConnectionClosed):
            await conn.send(encode_error(ErrorFrame(code, message)))
        await conn.close(CLOSE_PROTOCOL_ERROR, message)

    async def _handler(self, conn):
        client = None
        sender = None
        try:
            raw = await asyncio.wait_for(conn.recv(), timeout=HANDSHAKE_TIMEOUT)
            if isinstance(raw, str):
                raise ProtocolError("binary messages only")
            hello = decode(raw)
            if not isinstance(hello, Hello):
                raise ProtocolError("expected a handshake")
            if hello.version != VERSION:
                await self._close_with_error(
                    conn, ERR_VERSION, f"server speaks version {VERSION}"
                )
                return

            role = ROLE_OBSERVER
            if hello.want_steer and self._steerer is None:
                role = ROLE_STEERER
            client = _Client(conn, role, self.queue_depth)
            self._clients.add(client)
            if role == ROLE_STEERER:
                self._steerer = client
            await conn.send(encode_welcome(Welcome(VERSION, role)))
            sender = asyncio.create_task(self._send_loop(client))

            async for raw in conn:
                if isinstance(raw, str):
                    raise ProtocolError("binary messages only")
                msg = decode(raw)
                if not isinstance(msg, CommandFrame):
                    raise ProtocolError(f"unexpected {type(msg).__name__} from client")
                if client.role != ROLE_STEERER:
                    await self._close_with_error(conn, ERR_ROLE, "observers are read-only")
                    return
                self._latest = msg
        except ProtocolError as e:
            await self._close_with_error(conn, ERR_MALFORMED, str(e))
        except (ConnectionClosed, asyncio.TimeoutError):
            pass
        finally:
            if sender is not None:
                sender.cancel()
            if client is not None:
                self._clients.discard(client)
                if client is self._steerer:
                    self._steerer = None
                    self._latest = None
                    self._screw_rate = 0.0


def serve(cfg, port, host="127.0.0.1", divisor=1):
    """Run a streaming server until interrupted."""

    async def main():
        server = StreamServer(cfg, host=host, port=port, divisor=divisor)
        async with server.running():
            await asyncio.Event().wait()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
