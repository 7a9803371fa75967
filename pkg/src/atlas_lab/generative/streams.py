"""Per-member random streams.

Each ensemble member owns an independent generator derived from
``(seed, member index)``, so a member's draws do not depend on how members
are batched or on how many members run alongside it.
"""
from __future__ import annotations

import numpy as np
import torch


class MemberStreams:
    def __init__(self, seed: int, members, key: tuple[int, ...] = ()):
        if isinstance(members, int):
            members = range(members)
        self.members = list(members)
        self.seed = int(seed)
        self._gens = [np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *key, m])))
                      for m in self.members]

    def __len__(self):
        return len(self._gens)

    def subset(self, sl: slice) -> "MemberStreams":
        out = object.__new__(MemberStreams)
        out.members, out.seed, out._gens = self.members[sl], self.seed, self._gens[sl]
        return out

    def normal(self, shape: tuple[int, ...]) -> torch.Tensor:
        return torch.from_numpy(np.stack([g.standard_normal(shape, dtype=np.float32) for g in self._gens]))

    def signs(self) -> torch.Tensor:
        """One random sign per member."""
        return torch.tensor([1.0 if g.integers(0, 2) else -1.0 for g in self._gens], dtype=torch.float32)
