from typing import Dict, Iterable, List, Optional

from ..errors import ValidationError


class Vocab:
    """
    Interns names to dense integer ids in first-seen order. A frozen vocab
    refuses new names, which is how eval files are checked against a model.
    """

    def __init__(self, names: Iterable[str] = (), kind: str = "name"):
        self.kind = kind
        self._ids: Dict[str, int] = {}
        self._names: List[str] = []
        self.frozen = False
        for name in names:
            self.intern(name)

    def intern(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is not None:
            return idx
        if self.frozen:
            raise ValidationError(f"unknown {self.kind} {name!r}")

        idx = len(self._names)
        self._ids[name] = idx
        self._names.append(name)
        return idx

    def freeze(self) -> "Vocab":
        self.frozen = True
        return self

    def get(self, name: str, default: Optional[int] = None) -> Optional[int]:
        return self._ids.get(name, default)

    def name(self, idx: int) -> str:
        return self._names[idx]

    @property
    def names(self) -> List[str]:
        return list(self._names)

    def __getitem__(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise ValidationError(f"unknown {self.kind} {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self._ids

    def __len__(self):
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self._names == other._names

    def __repr__(self):
        return f"<Vocab {self.kind} size={len(self)}>"
