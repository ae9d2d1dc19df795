"""Attribute vocabulary: groups, binary splitting, prompt expansion, label statistics.

The schema file is the single source of attribute order. Every other artifact
(label vectors, logits, metrics reports) is index-aligned to the flat list of
binary attributes derived here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_PROMPT_TEMPLATE = "The attribute {noun} of this pedestrian is {value}"

# Slot-2 filler for standalone binary attributes ("hat" -> "... hat ... is present").
PRESENT = "present"

BINARY = "binary"
MULTI_CLASS = "multi-class"


class SchemaError(ValueError):
    """A schema file, group definition, or label vector violates the schema contract."""


@dataclass(frozen=True)
class AttributeGroup:
    """A named attribute family: either one yes/no attribute or a set of
    mutually exclusive classes that split into one binary attribute each."""

    name: str
    kind: str
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise SchemaError("group name must be nonempty")
        if self.kind not in (BINARY, MULTI_CLASS):
            raise SchemaError(f"group {self.name!r}: kind must be {BINARY!r} or {MULTI_CLASS!r}, got {self.kind!r}")
        if len(set(self.classes)) != len(self.classes):
            raise SchemaError(f"group {self.name!r}: class names must be unique")
        if self.kind == MULTI_CLASS and len(self.classes) < 2:
            raise SchemaError(f"group {self.name!r}: multi-class groups need >= 2 classes")
        if self.kind == BINARY:
            if len(self.classes) > 1:
                raise SchemaError(f"group {self.name!r}: binary groups carry at most one class name")
            if not self.classes:
                object.__setattr__(self, "classes", (self.name,))

    @property
    def size(self) -> int:
        return len(self.classes) if self.kind == MULTI_CLASS else 1


@dataclass(frozen=True)
class BinaryAttribute:
    """One entry of the flattened attribute list.

    ``noun`` and ``value`` are the two prompt slots. For attributes derived
    from a multi-class group they are (group name, class name); for standalone
    binary attributes the value slot falls back to the literal ``present``.
    """

    name: str
    group: str
    noun: str
    value: str
    group_index: int
    class_index: int


def split_to_binary(groups: Sequence[AttributeGroup]) -> list[str]:
    """Flatten groups into the ordered list of binary attribute names.

    Multi-class group g with classes c_1..c_C yields "<g> <c_1>" .. "<g> <c_C>";
    a binary group yields its own name. Order is group order then class order,
    so the result is deterministic for a given schema.
    """
    if not groups:
        raise SchemaError("schema needs at least one attribute group")
    names: list[str] = []
    for g in groups:
        if g.kind == MULTI_CLASS:
            names.extend(f"{g.name} {c}" for c in g.classes)
        else:
            names.append(g.name)
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise SchemaError(f"binary attribute names collide: {sorted(dupes)}")
    return names


def _derive_binary_attributes(groups: Sequence[AttributeGroup]) -> tuple[BinaryAttribute, ...]:
    split_to_binary(groups)  # surfaces duplicate-name errors with the same message
    out: list[BinaryAttribute] = []
    for gi, g in enumerate(groups):
        if g.kind == MULTI_CLASS:
            for ci, c in enumerate(g.classes):
                out.append(BinaryAttribute(f"{g.name} {c}", g.name, g.name, c, gi, ci))
        else:
            out.append(BinaryAttribute(g.name, g.name, g.name, PRESENT, gi, 0))
    return tuple(out)


def expand_attribute_to_sentence(attribute: BinaryAttribute, template: str = DEFAULT_PROMPT_TEMPLATE) -> str:
    """Fill the two prompt slots for one binary attribute.

    Never raises for a schema-derived attribute: the value slot is always
    populated (class name, or ``present`` for standalone binaries).
    """
    value = attribute.value or PRESENT
    try:
        return template.format(noun=attribute.noun, value=value)
    except (KeyError, IndexError):
        # Template carries only one recognizable slot: fall back to filling it
        # with the full attribute name.
        return template.format(noun=attribute.name, value="")


class AttributeSchema:
    """Immutable attribute vocabulary shared by every pipeline stage."""

    def __init__(
        self,
        groups: Sequence[AttributeGroup],
        prompt_template: str = DEFAULT_PROMPT_TEMPLATE,
        positive_ratios: np.ndarray | Sequence[float] | None = None,
    ):
        self.groups: tuple[AttributeGroup, ...] = tuple(groups)
        self.prompt_template = prompt_template
        self.binary_attributes: tuple[BinaryAttribute, ...] = _derive_binary_attributes(self.groups)
        self._index = {a.name: i for i, a in enumerate(self.binary_attributes)}
        self._group_index = {g.name: gi for gi, g in enumerate(self.groups)}
        if len(self._group_index) != len(self.groups):
            raise SchemaError("group names must be unique")
        if positive_ratios is not None:
            r = np.asarray(positive_ratios, dtype=np.float64)
            if r.shape != (self.num_attributes,):
                raise SchemaError(
                    f"positive_ratios has length {r.shape}, schema has {self.num_attributes} binary attributes"
                )
            if np.any(r < 0) or np.any(r > 1):
                raise SchemaError("positive_ratios entries must lie in [0, 1]")
            r.setflags(write=False)
            self.positive_ratios: np.ndarray | None = r
        else:
            self.positive_ratios = None

    # -- derived views ------------------------------------------------------

    @property
    def num_attributes(self) -> int:
        return len(self.binary_attributes)

    @property
    def attribute_names(self) -> list[str]:
        return [a.name for a in self.binary_attributes]

    def index_of(self, attribute_name: str) -> int:
        try:
            return self._index[attribute_name]
        except KeyError:
            raise SchemaError(f"unknown binary attribute {attribute_name!r}") from None

    def group_slice(self, group_name: str) -> slice:
        """Index range of a group's binary attributes within the flat list."""
        gi = self._group_index.get(group_name)
        if gi is None:
            raise SchemaError(f"unknown group {group_name!r}")
        start = sum(g.size for g in self.groups[:gi])
        return slice(start, start + self.groups[gi].size)

    def sentences(self) -> list[str]:
        return [expand_attribute_to_sentence(a, self.prompt_template) for a in self.binary_attributes]

    def canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    # -- file round trip ----------------------------------------------------

    def to_json_dict(self) -> dict:
        d: dict = {
            "groups": [
                {"name": g.name, "kind": g.kind, "classes": list(g.classes)} for g in self.groups
            ],
            "prompt_template": self.prompt_template,
        }
        if self.positive_ratios is not None:
            d["positive_ratios"] = [float(x) for x in self.positive_ratios]
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "AttributeSchema":
        try:
            raw_groups = d["groups"]
        except KeyError:
            raise SchemaError("schema file is missing the 'groups' field") from None
        groups = []
        for rg in raw_groups:
            try:
                groups.append(
                    AttributeGroup(
                        name=rg["name"],
                        kind=rg["kind"],
                        classes=tuple(rg.get("classes", ())),
                    )
                )
            except KeyError as e:
                raise SchemaError(f"group entry missing field {e}") from None
        return cls(
            groups,
            prompt_template=d.get("prompt_template", DEFAULT_PROMPT_TEMPLATE),
            positive_ratios=d.get("positive_ratios"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "AttributeSchema":
        with open(path, "r", encoding="utf-8") as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as e:
                raise SchemaError(f"schema file {path}: invalid JSON ({e})") from None
        return cls.from_json_dict(d)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, indent=2)
            f.write("\n")

    def __eq__(self, other) -> bool:
        return isinstance(other, AttributeSchema) and self.canonical_json() == other.canonical_json()

    def __repr__(self) -> str:
        return f"AttributeSchema({len(self.groups)} groups, {self.num_attributes} binary attributes)"


@dataclass
class LabelVector:
    """Binary label vector aligned to a schema, with a per-attribute known mask.

    Entries of a group marked unknown are excluded from the loss and metrics;
    known multi-class groups must be one-hot.
    """

    values: np.ndarray
    known: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int8)
        if self.known is None:
            self.known = np.ones(self.values.shape, dtype=bool)
        else:
            self.known = np.asarray(self.known, dtype=bool)
        if self.values.ndim != 1 or self.known.shape != self.values.shape:
            raise SchemaError("label vector and known mask must be 1-D and equally long")

    def validate(self, schema: AttributeSchema) -> "LabelVector":
        if self.values.shape[0] != schema.num_attributes:
            raise SchemaError(
                f"label vector length {self.values.shape[0]} != schema M={schema.num_attributes}"
            )
        bad = set(np.unique(self.values[self.known])) - {0, 1}
        if bad:
            raise SchemaError(f"known label entries must be 0/1, found {sorted(bad)}")
        for g in schema.groups:
            if g.kind != MULTI_CLASS:
                continue
            sl = schema.group_slice(g.name)
            known = self.known[sl]
            if not known.any():
                continue
            if not known.all():
                raise SchemaError(f"group {g.name!r}: multi-class groups are known or unknown as a whole")
            if int(self.values[sl].sum()) != 1:
                raise SchemaError(f"group {g.name!r}: known multi-class labels must be one-hot")
        return self


def compute_positive_ratios(
    labels: Iterable[LabelVector] | np.ndarray,
    known: np.ndarray | None = None,
) -> np.ndarray:
    """Per-attribute positive fraction over a training collection.

    r_j = (# vectors with y_j = 1) / (# vectors where attribute j is known).
    An attribute that is never positive gets ratio 0; an empty collection is
    an error. Ratios merge across shards as known-count-weighted means.
    """
    if isinstance(labels, np.ndarray):
        values = np.asarray(labels, dtype=np.float64)
        mask = np.ones(values.shape, dtype=bool) if known is None else np.asarray(known, dtype=bool)
    else:
        vecs = list(labels)
        if not vecs:
            raise SchemaError("cannot compute positive ratios of an empty collection")
        values = np.stack([v.values for v in vecs]).astype(np.float64)
        mask = np.stack([v.known for v in vecs])
    if values.size == 0:
        raise SchemaError("cannot compute positive ratios of an empty collection")
    if values.ndim != 2:
        raise SchemaError("expected a stack of label vectors (N, M)")
    pos = (values * mask).sum(axis=0)
    n_known = mask.sum(axis=0)
    return np.where(n_known > 0, pos / np.maximum(n_known, 1), 0.0)
