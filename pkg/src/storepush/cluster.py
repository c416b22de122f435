"""Wiring helpers: one host and one target, in-process or over TCP."""

from __future__ import annotations

from .extent_store import DEFAULT_BLOCK_SIZE, BlockDevice, ExtentStore
from .host import HostClient
from .sync import LoopbackSyncChannel, MetadataSyncer, ReplicaStore, TcpSyncChannel
from .target import ExecutionLimits, TargetServer
from .transport import LoopbackTransport, TcpTransport


class LocalCluster:
    """Host and target sharing one in-memory (or file-backed) device.

    With ``background_sync`` the synchronizer drains in its own thread;
    otherwise call ``sync()`` (tests do this to script interleavings).
    """

    def __init__(self, capacity_blocks: int = 1 << 16, block_size: int = DEFAULT_BLOCK_SIZE,
                 fragment_prob: float = 0.0, seed: int | None = None,
                 background_sync: bool = False, limits: ExecutionLimits | None = None,
                 path=None, poll_interval: float = 0.001):
        self.device = BlockDevice(capacity_blocks, block_size, path)
        self.store = ExtentStore(self.device, fragment_prob=fragment_prob, seed=seed)
        self.replicas = ReplicaStore(block_size)
        self.target = TargetServer(self.device, self.replicas, limits)
        self.sync_channel = LoopbackSyncChannel(self.replicas)
        self.syncer = MetadataSyncer(self.store, self.sync_channel, poll_interval)
        self.transport = LoopbackTransport(self.target)
        self.client = HostClient(self.store, self.syncer, self.transport)
        if background_sync:
            self.syncer.start()

    def sync(self) -> int:
        return self.syncer.drain_once()

    def close(self) -> None:
        self.syncer.stop()
        self.device.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class RemoteCluster:
    """Host half talking to a ``storepush target`` process over TCP.

    Host and target must open the same backing file with the same
    geometry; host writes land in that file directly.
    """

    def __init__(self, target: tuple[str, int], sync_target: tuple[str, int], backing: str,
                 capacity_blocks: int, block_size: int = DEFAULT_BLOCK_SIZE,
                 fragment_prob: float = 0.0, seed: int | None = None):
        self.device = BlockDevice(capacity_blocks, block_size, backing)
        self.store = ExtentStore(self.device, fragment_prob=fragment_prob, seed=seed)
        self.sync_channel = TcpSyncChannel(sync_target)
        self.syncer = MetadataSyncer(self.store, self.sync_channel)
        self.transport = TcpTransport(target)
        self.client = HostClient(self.store, self.syncer, self.transport)
        self.target = None
        self.syncer.start()

    def sync(self) -> int:
        return self.syncer.drain_once()

    def close(self) -> None:
        self.syncer.stop()
        self.sync_channel.close()
        self.transport.close()
        self.device.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
