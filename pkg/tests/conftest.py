import math
import socket

import numpy as np
import pytest

LOOPBACK_PREFIXES = ("127.", "::1", "localhost")


class ExternalNetworkBlocked(AssertionError):
    pass


@pytest.fixture
def no_external_network(monkeypatch):
    """Fail the test if anything connects to a non-loopback address."""
    real_connect = socket.socket.connect

    def guard(self, address, *args, **kwargs):
        host = address[0] if isinstance(address, tuple) else address
        if isinstance(host, (bytes, str)):
            text = host.decode() if isinstance(host, bytes) else host
            if not text.startswith(LOOPBACK_PREFIXES):
                raise ExternalNetworkBlocked(f"external connect attempted: {address}")
        return real_connect(self, address, *args, **kwargs)

    monkeypatch.setattr(socket.socket, "connect", guard)
    return guard


def single_linkage_labels(points: np.ndarray, radius: float) -> np.ndarray:
    """Connected-group label per point when points within radius link up."""
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=int)
    diff = points[:, None, :] - points[None, :, :]
    adjacency = (diff**2).sum(axis=2) <= radius * radius
    labels = np.full(n, -1, dtype=int)
    current = 0
    for start in range(n):
        if labels[start] != -1:
            continue
        frontier = [start]
        labels[start] = current
        while frontier:
            node = frontier.pop()
            for neighbor in np.nonzero(adjacency[node])[0]:
                if labels[neighbor] == -1:
                    labels[neighbor] = current
                    frontier.append(int(neighbor))
        current += 1
    return labels


def single_linkage_groups(points: np.ndarray, radius: float) -> int:
    """Number of connected groups when points within radius are linked."""
    return int(single_linkage_labels(points, radius).max() + 1) if len(points) else 0
