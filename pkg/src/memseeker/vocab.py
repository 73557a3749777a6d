"""Token vocabulary shared by the task generators, model, and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass

SPECIALS = ("PAD", "BOS", "SPLIT", "QUERY", "EOS", "SEMI", "TSEP", "SUMMARY")

N_DIGITS = 10
N_KEYS = 16
N_VALUES = 16
N_ENTITIES = 8
N_FILLERS = 64


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]

    @classmethod
    def standard(cls) -> "Vocabulary":
        syms = list(SPECIALS)
        syms += [f"d{i}" for i in range(N_DIGITS)]
        syms += [f"k{i}" for i in range(N_KEYS)]
        syms += [f"v{i}" for i in range(N_VALUES)]
        syms += [f"e{i}" for i in range(N_ENTITIES)]
        syms += [f"f{i}" for i in range(N_FILLERS)]
        return cls(tuple(syms))

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate vocabulary symbols")
        missing = [s for s in SPECIALS if s not in self.symbols]
        if missing:
            raise ValueError(f"vocabulary lacks reserved symbols {missing}")
        object.__setattr__(self, "_ids", {s: i for i, s in enumerate(self.symbols)})

    def __len__(self) -> int:
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        return self._ids[symbol]

    def symbol(self, idx: int) -> str:
        return self.symbols[idx]

    def _group(self, prefix: str) -> list[int]:
        return [i for i, s in enumerate(self.symbols) if s[0] == prefix and s[1:].isdigit()]

    @property
    def pad(self) -> int:
        return self._ids["PAD"]

    @property
    def bos(self) -> int:
        return self._ids["BOS"]

    @property
    def split(self) -> int:
        return self._ids["SPLIT"]

    @property
    def query(self) -> int:
        return self._ids["QUERY"]

    @property
    def eos(self) -> int:
        return self._ids["EOS"]

    @property
    def semi(self) -> int:
        return self._ids["SEMI"]

    @property
    def tsep(self) -> int:
        return self._ids["TSEP"]

    @property
    def summary(self) -> int:
        return self._ids["SUMMARY"]

    @property
    def digits(self) -> list[int]:
        return self._group("d")

    @property
    def keys(self) -> list[int]:
        return self._group("k")

    @property
    def values(self) -> list[int]:
        return self._group("v")

    @property
    def entities(self) -> list[int]:
        return self._group("e")

    @property
    def fillers(self) -> list[int]:
        return self._group("f")

    def to_text(self) -> str:
        return "".join(f"{s} {i}\n" for i, s in enumerate(self.symbols))

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        pairs = []
        for line in text.splitlines():
            if not line.strip():
                continue
            sym, idx = line.rsplit(" ", 1)
            pairs.append((int(idx), sym))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError("vocabulary ids are not contiguous")
        return cls(tuple(s for _, s in pairs))

    def encode_number(self, n: int) -> list[int]:
        d = self.digits
        return [d[int(c)] for c in str(int(n))]
