"""Object schemas and fixed-size record layout.

A schema file declares one object with typed fields, each carrying an
ordered list of tier tags::

    # person, image kept on disk
    object person {
        age: i32 @pmem
        image: bytes @disk
        place: string @pmem
        name: string @pmem
    }

Fields are packed in declaration order with no padding.  Fixed-width
kinds are stored inline; ``bytes`` and ``string`` store an 8-byte handle
to a separately allocated buffer.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

DEFAULT_TIERS: dict[str, int] = {"dram": 0, "pmem": 1, "disk": 2}

HANDLE_WIDTH = 8

# kind -> (struct format, width); None marks a variable kind
KINDS: dict[str, tuple[str, int] | None] = {
    "i16": ("<h", 2),
    "i32": ("<i", 4),
    "i64": ("<q", 8),
    "f32": ("<f", 4),
    "f64": ("<d", 8),
    "bytes": None,
    "string": None,
}


class SchemaError(ValueError):
    """Raised for malformed schema text or an invalid layout request."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


def is_variable(kind: str) -> bool:
    return KINDS[kind] is None


def kind_width(kind: str) -> int:
    """Bytes the kind occupies inside a record (8 for handle-stored kinds)."""
    spec = KINDS[kind]
    return HANDLE_WIDTH if spec is None else spec[1]


def kind_format(kind: str) -> str:
    spec = KINDS[kind]
    if spec is None:
        raise SchemaError(f"kind {kind!r} has no inline encoding")
    return spec[0]


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str
    tags: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown kind {self.kind!r} for field {self.name!r}")
        if not self.tags:
            raise SchemaError(f"field {self.name!r} has an empty tag list")
        if len(set(self.tags)) != len(self.tags):
            raise SchemaError(f"field {self.name!r} repeats a tag")

    @property
    def variable(self) -> bool:
        return is_variable(self.kind)

    @property
    def width(self) -> int:
        return kind_width(self.kind)


@dataclass(frozen=True)
class ObjectSchema:
    name: str
    fields: tuple[FieldSpec, ...]

    def __post_init__(self):
        seen = set()
        for f in self.fields:
            if f.name in seen:
                raise SchemaError(f"duplicate field name {f.name!r}")
            seen.add(f.name)

    def field(self, name: str) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(f"schema {self.name!r} has no field {name!r}")

    @property
    def field_names(self) -> list[str]:
        return [f.name for f in self.fields]

    def default_assignment(self) -> dict[str, str]:
        return {f.name: f.tags[0] for f in self.fields}

    def with_tags(self, tags: Mapping[str, Sequence[str]]) -> ObjectSchema:
        """Copy of the schema with the given fields retagged."""
        fields = tuple(
            FieldSpec(f.name, f.kind, tuple(tags[f.name])) if f.name in tags else f
            for f in self.fields
        )
        return ObjectSchema(self.name, fields)

    def to_text(self) -> str:
        lines = [f"object {self.name} {{"]
        for f in self.fields:
            tags = " ".join("@" + t for t in f.tags)
            lines.append(f"    {f.name}: {f.kind} {tags}")
        lines.append("}")
        return "\n".join(lines) + "\n"


_TOKEN = re.compile(
    r"(?P<ws>[ \t\r]+)|(?P<nl>\n)|(?P<comment>#[^\n]*)"
    r"|(?P<tag>@[A-Za-z_][A-Za-z0-9_]*)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<punct>[{}:,;])"
)


def _tokenize(text: str):
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise SchemaError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            yield kind, m.group(), line, col
        pos = m.end()
    yield "eof", "", line, pos - line_start + 1


class _Parser:
    def __init__(self, text: str, tiers: Mapping[str, int]):
        self.tokens = list(_tokenize(text))
        self.i = 0
        self.tiers = tiers

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind: str, value: str | None = None):
        tok = self.tokens[self.i]
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            got = tok[1] or "end of input"
            raise SchemaError(f"expected {want!r}, got {got!r}", tok[2], tok[3])
        self.i += 1
        return tok

    def parse(self) -> ObjectSchema:
        self.take("ident", "object")
        name = self.take("ident")[1]
        self.take("punct", "{")
        fields: list[FieldSpec] = []
        names: set[str] = set()
        while self.peek()[:2] != ("punct", "}"):
            tok = self.take("ident")
            fname, line, col = tok[1], tok[2], tok[3]
            if fname in names:
                raise SchemaError(f"duplicate field name {fname!r}", line, col)
            self.take("punct", ":")
            ktok = self.take("ident")
            if ktok[1] not in KINDS:
                raise SchemaError(f"unknown kind {ktok[1]!r}", ktok[2], ktok[3])
            tags: list[str] = []
            while self.peek()[0] == "tag":
                ttok = self.take("tag")
                tag = ttok[1][1:]
                if tag not in self.tiers:
                    raise SchemaError(f"unknown tier tag {ttok[1]!r}", ttok[2], ttok[3])
                if tag in tags:
                    raise SchemaError(f"duplicate tag {ttok[1]!r}", ttok[2], ttok[3])
                tags.append(tag)
            if not tags:
                raise SchemaError(f"field {fname!r} has an empty tag list", line, col)
            fields.append(FieldSpec(fname, ktok[1], tuple(tags)))
            names.add(fname)
            if self.peek()[:2] in (("punct", ","), ("punct", ";")):
                self.i += 1
        self.take("punct", "}")
        self.take("eof")
        return ObjectSchema(name, tuple(fields))


def parse_schema(text: str, tiers: Mapping[str, int] = DEFAULT_TIERS) -> ObjectSchema:
    """Parse schema source text; raises SchemaError with line/column on failure."""
    return _Parser(text, tiers).parse()


@dataclass(frozen=True)
class Slot:
    """Where one field lives: ``offset`` and ``width`` inside the record
    region on tier ``region``; ``tier`` is the field's assigned tier
    (the payload tier for handle-stored kinds)."""

    name: str
    kind: str
    offset: int
    width: int
    tier: str
    region: str

    @property
    def variable(self) -> bool:
        return is_variable(self.kind)


@dataclass(frozen=True)
class LayoutPlan:
    schema_name: str
    home: str
    slots: tuple[Slot, ...]
    region_sizes: tuple[tuple[str, int], ...]
    # home-region offset of the handle pointing at each secondary region
    links: tuple[tuple[str, int], ...] = ()
    _index: dict = field(default=None, compare=False, repr=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {s.name: s for s in self.slots})

    def slot(self, name: str) -> Slot:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"layout {self.schema_name!r} has no field {name!r}") from None

    @property
    def record_size(self) -> int:
        """Size of the home record region."""
        return dict(self.region_sizes)[self.home]

    @property
    def sizes(self) -> dict[str, int]:
        return dict(self.region_sizes)

    @property
    def assignment(self) -> dict[str, str]:
        return {s.name: s.tier for s in self.slots}

    def to_rows(self) -> list[tuple[str, int, int, str, str]]:
        return [(s.name, s.offset, s.width, s.region, s.tier) for s in self.slots]


def choose_home(tiers_used: Sequence[str], tier_ids: Mapping[str, int] = DEFAULT_TIERS) -> str:
    """Pick the tier holding the inline record: pmem when any field is
    assigned there, otherwise the lowest-id assigned tier."""
    if "pmem" in tiers_used:
        return "pmem"
    return min(tiers_used, key=lambda t: tier_ids[t])


def compute_layout(
    schema: ObjectSchema,
    assignment: Mapping[str, str] | None = None,
    tier_ids: Mapping[str, int] = DEFAULT_TIERS,
) -> LayoutPlan:
    if assignment is None:
        assignment = schema.default_assignment()
    extra = set(assignment) - set(schema.field_names)
    if extra:
        raise SchemaError(f"assignment names unknown fields: {sorted(extra)}")
    for f in schema.fields:
        if f.name not in assignment:
            raise SchemaError(f"assignment is missing field {f.name!r}")
        if assignment[f.name] not in f.tags:
            raise SchemaError(
                f"field {f.name!r} assigned to {assignment[f.name]!r}, not in its tags {list(f.tags)}"
            )

    home = choose_home([assignment[f.name] for f in schema.fields], tier_ids)
    cursors: dict[str, int] = {home: 0}
    slots = []
    for f in schema.fields:
        tier = assignment[f.name]
        region = home if f.variable else tier
        offset = cursors.setdefault(region, 0)
        slots.append(Slot(f.name, f.kind, offset, f.width, tier, region))
        cursors[region] = offset + f.width

    links = []
    for region in cursors:
        if region != home:
            links.append((region, cursors[home]))
            cursors[home] += HANDLE_WIDTH
    return LayoutPlan(
        schema_name=schema.name,
        home=home,
        slots=tuple(slots),
        region_sizes=tuple(cursors.items()),
        links=tuple(links),
    )


def pack_value(kind: str, value) -> bytes:
    return struct.pack(kind_format(kind), value)


def unpack_value(kind: str, data: bytes, offset: int = 0):
    return struct.unpack_from(kind_format(kind), data, offset)[0]
