"""Edge and cloud executors, the byte-stream transport, and the latency model.

Transport framing: every message is a 4-byte little-endian length prefix
followed by that many bytes. A connection opens with a handshake frame
(magic "AVQH", version byte, u8 hash count, u64 codebook hashes); the cloud
replies with its own handshake or closes after an error frame, so a codebook
desync is rejected before any payload is decoded. Requests are
(u32 request id + payload bytes); replies are (u32 request id echoed,
u32 batch, u32 classes, float32 logits).

The latency model is analytic: transmit = (payload + overhead) * 8 / bandwidth
+ rtt / 2 (one-way), alongside measured compute times.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dlp import AlignedVQModule, dlp_out
from .encoder import PartitionSpec, VisionEncoder
from .vq import dequantize_indices
from .wire import CodebookDesyncError, WireError, decode_indices, encode_payload

HANDSHAKE_MAGIC = b"AVQH"
PROTOCOL_VERSION = 1


class TransportError(RuntimeError):
    """Connection-level failure (framing, handshake, premature close)."""


@dataclass(frozen=True)
class LinkModel:
    bandwidth_bps: float
    rtt_s: float = 0.0
    overhead_bytes: int = 0

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive")
        if self.rtt_s < 0:
            raise ValueError("rtt must be non-negative")


@dataclass
class LatencyReport:
    edge_compute_s: float
    transmit_s: float
    cloud_compute_s: float
    total_s: float
    payload_bytes: float


def simulate_latency(payload_bytes, link: LinkModel, edge_s, cloud_s) -> LatencyReport:
    """One-way analytic decomposition; exact (e.g. Fraction in, Fraction out)
    when fed exact numbers."""
    transmit = (payload_bytes + link.overhead_bytes) * 8 / link.bandwidth_bps
    if link.rtt_s:
        transmit = transmit + link.rtt_s / 2
    total = edge_s + transmit + cloud_s
    return LatencyReport(edge_s, transmit, cloud_s, total, payload_bytes)


# ---------------------------------------------------------------------------
# in-process executors
# ---------------------------------------------------------------------------

def edge_run(images: np.ndarray, model: VisionEncoder, partition: PartitionSpec,
             vq_module: AlignedVQModule) -> tuple[bytes, float]:
    """Forward to the partition, quantize, encode. Returns (payload, seconds);
    the clock covers compute and encode only."""
    start = time.perf_counter()
    grid = model.edge_forward(images, partition, vq_module)
    payload = encode_payload(grid, vq_module.vq_config.index_bits, vq_module.codebook_hashes())
    return payload, time.perf_counter() - start


def cloud_run(payload: bytes, model: VisionEncoder, partition: PartitionSpec,
              vq_module: AlignedVQModule) -> tuple[np.ndarray, float]:
    """Validate hashes, decode, resume per the residual-substitution rule."""
    start = time.perf_counter()
    grid, m = decode_indices(payload, expected_hashes=vq_module.codebook_hashes())
    if m != vq_module.vq_config.index_bits:
        raise WireError(f"payload index width {m} != codebook width "
                        f"{vq_module.vq_config.index_bits}")
    features = dequantize_indices(grid, vq_module.vq_config, vq_module.codebooks)
    with ad.no_grad():
        recovered = dlp_out(ad.Var(features), vq_module.dlp)
        logits = model.cloud_forward(recovered, partition)
    return logits.value, time.perf_counter() - start


# ---------------------------------------------------------------------------
# framed transport
# ---------------------------------------------------------------------------

def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(struct.pack("<I", len(payload)) + payload)


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    while count:
        chunk = sock.recv(count)
        if not chunk:
            raise TransportError("connection closed mid-frame")
        chunks.append(chunk)
        count -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> bytes:
    length, = struct.unpack("<I", _recv_exact(sock, 4))
    return _recv_exact(sock, length)


def handshake_frame(hashes: list[int]) -> bytes:
    return (HANDSHAKE_MAGIC + struct.pack("<BB", PROTOCOL_VERSION, len(hashes))
            + struct.pack(f"<{len(hashes)}Q", *hashes))


def parse_handshake(frame: bytes) -> list[int]:
    if len(frame) < 6 or frame[:4] != HANDSHAKE_MAGIC:
        raise TransportError("bad handshake magic")
    version, count = frame[4], frame[5]
    if version != PROTOCOL_VERSION:
        raise TransportError(f"handshake version {version} unsupported")
    if len(frame) != 6 + 8 * count:
        raise TransportError("handshake length mismatch")
    return list(struct.unpack_from(f"<{count}Q", frame, 6))


ERROR_PREFIX = b"AVQE"


class CloudServer:
    """Serves split-inference requests. One in-flight request per connection,
    served sequentially; concurrent connections each get a thread. Model state
    is read-only while serving."""

    def __init__(self, model: VisionEncoder, partition: PartitionSpec,
                 vq_module: AlignedVQModule, host: str = "127.0.0.1", port: int = 0):
        self.model = model
        self.partition = partition
        self.vq_module = vq_module
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def serve_forever(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            worker = threading.Thread(target=self._serve_connection, args=(conn,), daemon=True)
            worker.start()
            self._threads.append(worker)

    def start(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread

    def stop(self) -> None:
        self._stop.set()
        self._sock.close()
        for t in self._threads:
            t.join(timeout=2)

    def _serve_connection(self, conn: socket.socket) -> None:
        with conn:
            try:
                theirs = parse_handshake(recv_frame(conn))
            except TransportError as exc:
                send_frame(conn, ERROR_PREFIX + str(exc).encode())
                return
            ours = self.vq_module.codebook_hashes()
            if theirs != ours:
                send_frame(conn, ERROR_PREFIX + b"codebook hash mismatch")
                return
            send_frame(conn, handshake_frame(ours))
            while not self._stop.is_set():
                try:
                    frame = recv_frame(conn)
                except TransportError:
                    return  # client closed
                request_id, = struct.unpack_from("<I", frame)
                try:
                    logits, _ = cloud_run(frame[4:], self.model, self.partition, self.vq_module)
                except (WireError, CodebookDesyncError) as exc:
                    send_frame(conn, ERROR_PREFIX + str(exc).encode())
                    return
                batch, classes = logits.shape
                reply = struct.pack("<III", request_id, batch, classes)
                reply += np.ascontiguousarray(logits, dtype="<f4").tobytes()
                send_frame(conn, reply)


class EdgeClient:
    """Runs the edge half and ships payloads to a cloud server."""

    def __init__(self, host: str, port: int, model: VisionEncoder,
                 partition: PartitionSpec, vq_module: AlignedVQModule):
        self.model = model
        self.partition = partition
        self.vq_module = vq_module
        self._sock = socket.create_connection((host, port))
        self._next_id = 0
        send_frame(self._sock, handshake_frame(vq_module.codebook_hashes()))
        reply = recv_frame(self._sock)
        if reply.startswith(ERROR_PREFIX):
            self._sock.close()
            raise TransportError(f"handshake rejected: {reply[4:].decode()}")
        theirs = parse_handshake(reply)
        if theirs != vq_module.codebook_hashes():
            self._sock.close()
            raise TransportError("cloud returned different codebook hashes")

    def request(self, images: np.ndarray) -> tuple[np.ndarray, int, float]:
        """Returns (logits, echoed request id, edge compute seconds)."""
        payload, edge_s = edge_run(images, self.model, self.partition, self.vq_module)
        request_id = self._next_id
        self._next_id += 1
        send_frame(self._sock, struct.pack("<I", request_id) + payload)
        reply = recv_frame(self._sock)
        if reply.startswith(ERROR_PREFIX):
            raise TransportError(f"cloud error: {reply[4:].decode()}")
        echoed, batch, classes = struct.unpack_from("<III", reply)
        logits = np.frombuffer(reply, dtype="<f4", offset=12).reshape(batch, classes).copy()
        return logits, echoed, edge_s

    def close(self) -> None:
        self._sock.close()


# ---------------------------------------------------------------------------
# benchmark sweeps
# ---------------------------------------------------------------------------

def measure_compute(model: VisionEncoder, partition: PartitionSpec,
                    vq_module: AlignedVQModule, images: np.ndarray,
                    repeats: int = 3) -> tuple[float, float, float]:
    """Median measured (edge_s, cloud_s, monolithic_s) for one batch."""
    edge_times, cloud_times, mono_times = [], [], []
    for _ in range(repeats):
        payload, edge_s = edge_run(images, model, partition, vq_module)
        _, cloud_s = cloud_run(payload, model, partition, vq_module)
        start = time.perf_counter()
        with ad.no_grad():
            model.forward(images)
        mono_times.append(time.perf_counter() - start)
        edge_times.append(edge_s)
        cloud_times.append(cloud_s)
    return (float(np.median(edge_times)), float(np.median(cloud_times)),
            float(np.median(mono_times)))


def latency_sweep(payload_bytes, baseline_payloads: dict, bandwidths_bps: list,
                  edge_s: float, cloud_s: float, cloud_only_s: float,
                  link_rtt_s: float = 0.0, overhead_bytes: int = 0) -> list[dict]:
    """Rows comparing the split pipeline against cloud-only baselines that
    transmit fixed-size payloads (e.g. externally given image-codec sizes)."""
    rows = []
    for bw in bandwidths_bps:
        link = LinkModel(bw, link_rtt_s, overhead_bytes)
        ours = simulate_latency(payload_bytes, link, edge_s, cloud_s)
        row = {
            "bandwidth_bps": bw,
            "payload_bytes": float(payload_bytes),
            "edge_s": float(edge_s),
            "transmit_s": float(ours.transmit_s),
            "cloud_s": float(cloud_s),
            "total_s": float(ours.total_s),
        }
        for name, baseline_bytes in baseline_payloads.items():
            other = simulate_latency(baseline_bytes, link, 0.0, cloud_only_s)
            row[f"{name}_total_s"] = float(other.total_s)
            row[f"speedup_vs_{name}"] = float(other.total_s / ours.total_s)
        rows.append(row)
    return rows
