"""Fixed-capacity FIFO of negative embeddings."""

from __future__ import annotations

import torch

from .errors import ContractError


class EmbeddingQueue:
    """Ring buffer of unit-norm key embeddings.

    ``snapshot()`` returns rows oldest-first. Stored rows never carry gradients.
    """

    def __init__(self, capacity: int, dim: int = 256, dtype=torch.float32, norm_tol: float = 1e-4):
        if capacity < 1:
            raise ContractError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.norm_tol = norm_tol
        self.buffer = torch.zeros((capacity, dim), dtype=dtype)
        self.cursor = 0
        self.fill = 0

    def __len__(self):
        return self.fill

    @property
    def full(self) -> bool:
        return self.fill == self.capacity

    def enqueue(self, batch: torch.Tensor) -> "EmbeddingQueue":
        batch = batch.detach()
        if batch.dim() != 2 or batch.shape[1] != self.dim:
            raise ContractError(f"expected B x {self.dim} embeddings, got {tuple(batch.shape)}")
        n = batch.shape[0]
        if n > self.capacity:
            raise ContractError(f"batch of {n} exceeds queue capacity {self.capacity}")
        if n == 0:
            return self
        norms = batch.double().norm(dim=1)
        if (norms - 1).abs().max() > self.norm_tol:
            raise ContractError("queue embeddings must be unit-norm")
        idx = (torch.arange(n) + self.cursor) % self.capacity
        self.buffer[idx] = batch.to(self.buffer.dtype)
        self.cursor = (self.cursor + n) % self.capacity
        self.fill = min(self.capacity, self.fill + n)
        return self

    def snapshot(self) -> torch.Tensor:
        if self.fill < self.capacity:
            return self.buffer[: self.fill].clone()
        return torch.cat([self.buffer[self.cursor :], self.buffer[: self.cursor]]).clone()

    def state_dict(self) -> dict:
        return {
            "buffer": self.buffer.clone(),
            "cursor": torch.tensor(self.cursor, dtype=torch.int64),
            "fill": torch.tensor(self.fill, dtype=torch.int64),
        }

    def load_state_dict(self, state: dict):
        if tuple(state["buffer"].shape) != tuple(self.buffer.shape):
            raise ContractError(f"queue buffer shape {tuple(state['buffer'].shape)} != {tuple(self.buffer.shape)}")
        self.buffer = state["buffer"].clone().to(self.buffer.dtype)
        self.cursor = int(state["cursor"])
        self.fill = int(state["fill"])
