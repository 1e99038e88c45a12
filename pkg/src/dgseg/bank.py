"""Fixed-capacity FIFO store of previously tested images.

Each incoming test image borrows companions from the bank to form the
batch its normalization statistics are computed from. Companions are
chosen either by style similarity (smallest symmetric KL to the query,
"sib") or by recency ("qib"). The domain tag on entries is evaluation
metadata only; selection never looks at it.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .network import ModelParams, NormMode, extract_query_style, forward
from .normstats import StyleSignature, symmetric_kl
from .tensor import no_grad

__all__ = ["BankEntry", "ImageBank"]

POLICIES = ("sib", "qib")


@dataclass
class BankEntry:
    image: np.ndarray  # (1, C, H, W)
    style: StyleSignature
    arrival_index: int
    domain_tag: int | None = None


class ImageBank:
    """FIFO bank with style-based or recency-based companion selection."""

    def __init__(self, capacity: int, policy: str = "sib"):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        if policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
        self.capacity = capacity
        self.policy = policy
        self.entries: deque[BankEntry] = deque(maxlen=capacity)
        self._next_arrival = 0

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, image: np.ndarray, style: StyleSignature, domain_tag: int | None = None) -> BankEntry:
        """Append an entry, evicting the oldest when full."""
        image = np.asarray(image)
        if image.ndim != 4 or image.shape[0] != 1:
            raise ValueError(f"bank stores single images of shape (1,C,H,W), got {image.shape}")
        if self.entries and style.channels != self.entries[0].style.channels:
            raise ValueError("style channel count differs from stored entries")
        entry = BankEntry(image, style, self._next_arrival, domain_tag)
        self._next_arrival += 1
        self.entries.append(entry)
        return entry

    def select(self, query_style: StyleSignature, m: int) -> list[BankEntry]:
        """The min(m, size) companions for a query.

        sib: smallest symmetric KL to the query, ties to older entries.
        qib: the most recent entries, oldest of those first.
        """
        if m < 0:
            raise ValueError("m must be nonnegative")
        m = min(m, len(self.entries))
        if m == 0:
            return []
        if self.policy == "qib":
            return list(self.entries)[-m:]
        ranked = sorted(
            self.entries,
            key=lambda e: (symmetric_kl(e.style, query_style), e.arrival_index),
        )
        return ranked[:m]

    def predict_with_bank(
        self,
        image,
        params: ModelParams,
        m: int,
        domain_tag: int | None = None,
    ) -> tuple[np.ndarray, list[BankEntry]]:
        """Predict one image using bank companions for the statistics.

        The batch is [image, companions...], normalized by its own
        moments; only the first row's argmax is returned. The image is
        pushed afterwards, so it never serves as its own companion.
        Returns (prediction (H,W) int64, the selected companions).
        """
        image = np.asarray(image, dtype=params.dtype)
        if image.ndim != 4 or image.shape[0] != 1:
            raise ValueError(f"expected a single (1,C,H,W) image, got shape {image.shape}")
        if self.entries and self.entries[0].image.shape != image.shape:
            raise ValueError(
                f"image shape {image.shape} differs from bank entries {self.entries[0].image.shape}"
            )
        query_style = extract_query_style(params, image)
        selected = self.select(query_style, m)
        batch = np.concatenate([image] + [e.image for e in selected], axis=0)
        with no_grad():
            logits, _, _ = forward(params, batch, NormMode.TARGET_SPECIFIC)
        pred = np.argmax(logits.data[0], axis=0).astype(np.int64)
        self.push(image, query_style, domain_tag)
        return pred, selected

    def dump_rows(self) -> list[dict]:
        """Bank contents oldest-first, for the CSV debug dump."""
        rows = []
        for e in self.entries:
            rows.append(
                {
                    "arrival_index": e.arrival_index,
                    "style_mu": ";".join(repr(float(v)) for v in e.style.mu),
                    "style_sigma": ";".join(repr(float(v)) for v in e.style.sigma),
                    "domain_tag": "" if e.domain_tag is None else e.domain_tag,
                }
            )
        return rows
