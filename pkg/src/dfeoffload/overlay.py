"""Parametric R x C dataflow-overlay model: cells, routing, configuration.

Cells sit on a Manhattan grid.  Each cell has four directional inputs, four
directional outputs, and one functional unit (FU).  Every output can forward
one of the other three inputs or the FU result; every FU pin can tap any
input or be masked with a stored constant (at most one mask per cell).  The
outward-facing sides of border cells are the only stream interfaces, so a
grid offers exactly 2*(R+C) input and 2*(R+C) output interfaces.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterator, Optional, Union

from .dfg import INT32_MAX, INT32_MIN, OP_ARITY, OpCode, Violation


class Direction(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


_DELTA = {Direction.N: (-1, 0), Direction.E: (0, 1),
          Direction.S: (1, 0), Direction.W: (0, -1)}
_OPPOSITE = {Direction.N: Direction.S, Direction.E: Direction.W,
             Direction.S: Direction.N, Direction.W: Direction.E}


def opposite(d: Direction) -> Direction:
    return _OPPOSITE[d]


class Pin(IntEnum):
    IN1 = 0
    IN2 = 1
    SEL = 2


FU = "FU"  # out_sel source meaning "this cell's functional-unit output"

OutSel = Union[None, Direction, str]


class UnroutedPort(LookupError):
    pass


@dataclass(frozen=True)
class OverlayShape:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("overlay must be at least 1x1")

    def cells(self) -> Iterator[tuple[int, int]]:
        for r in range(self.rows):
            for c in range(self.cols):
                yield (r, c)

    def in_bounds(self, r: int, c: int) -> bool:
        return 0 <= r < self.rows and 0 <= c < self.cols

    def neighbor(self, r: int, c: int, d: Direction) -> Optional[tuple[int, int]]:
        dr, dc = _DELTA[d]
        nr, nc = r + dr, c + dc
        return (nr, nc) if self.in_bounds(nr, nc) else None

    def outward_sides(self, r: int, c: int) -> list[Direction]:
        return [d for d in Direction if self.neighbor(r, c, d) is None]

    def io_capacity(self) -> tuple[int, int]:
        """(input interfaces, output interfaces): one per outward cell side."""
        n = 2 * (self.rows + self.cols)
        return n, n

    def border_ports(self) -> list[tuple[int, int, Direction]]:
        """All outward sides in a fixed order: N row, E col, S row, W col."""
        ports = []
        for c in range(self.cols):
            ports.append((0, c, Direction.N))
        for r in range(self.rows):
            ports.append((r, self.cols - 1, Direction.E))
        for c in range(self.cols):
            ports.append((self.rows - 1, c, Direction.S))
        for r in range(self.rows):
            ports.append((r, 0, Direction.W))
        return ports


def _fresh_out_sel() -> dict[Direction, OutSel]:
    return {d: None for d in Direction}


@dataclass
class CellConfig:
    fu_op: Optional[OpCode] = None
    fu_in1: Optional[Direction] = None
    fu_in2: Optional[Direction] = None
    fu_sel: Optional[Direction] = None
    mask: Optional[tuple[Pin, int]] = None  # one const-masked FU pin
    out_sel: dict[Direction, OutSel] = field(default_factory=_fresh_out_sel)

    def is_empty(self) -> bool:
        return (self.fu_op is None and self.mask is None
                and all(v is None for v in self.out_sel.values()))

    def pin_select(self, pin: Pin) -> Optional[Direction]:
        return (self.fu_in1, self.fu_in2, self.fu_sel)[pin]


@dataclass
class OverlayConfig:
    """A full overlay "bitstream": per-cell settings plus stream-tag bindings.

    Treat as immutable once built; all queries here are read-only.
    """

    shape: OverlayShape
    cells: dict[tuple[int, int], CellConfig]
    io_in: dict[tuple[int, int, Direction], int] = field(default_factory=dict)
    io_out: dict[tuple[int, int, Direction], int] = field(default_factory=dict)

    def cell(self, r: int, c: int) -> CellConfig:
        return self.cells[(r, c)]


def new_overlay(rows: int, cols: int) -> OverlayConfig:
    shape = OverlayShape(rows, cols)
    return OverlayConfig(shape, {rc: CellConfig() for rc in shape.cells()})


@dataclass(frozen=True)
class BorderOrigin:
    r: int
    c: int
    side: Direction


@dataclass(frozen=True)
class CellOrigin:
    r: int
    c: int


Origin = Union[BorderOrigin, CellOrigin]


def trace_port(cfg: OverlayConfig, cell: tuple[int, int],
               port: Direction) -> Origin:
    """Walk an input pin backwards through pass-through outputs to its source.

    Returns the border input interface or the cell whose FU produces the
    value; raises UnroutedPort when the chain hits a disabled output.
    """
    r, c = cell
    d = port
    seen = set()
    while True:
        if (r, c, d) in seen:
            raise UnroutedPort(f"routing cycle at cell ({r},{c}) port {d.name}")
        seen.add((r, c, d))
        nb = cfg.shape.neighbor(r, c, d)
        if nb is None:
            return BorderOrigin(r, c, d)
        sel = cfg.cell(*nb).out_sel[opposite(d)]
        if sel is None:
            raise UnroutedPort(f"cell ({nb[0]},{nb[1]}) output "
                               f"{opposite(d).name} is disabled")
        if sel == FU:
            return CellOrigin(*nb)
        r, c = nb
        d = sel


def _fed_pins(cell: CellConfig) -> dict[Pin, str]:
    """pin -> 'wire' | 'mask' for every pin that has a source."""
    fed = {}
    for pin in Pin:
        if cell.pin_select(pin) is not None:
            fed[pin] = "wire"
    if cell.mask is not None:
        pin = cell.mask[0]
        if pin in fed:
            fed[pin] = "both"  # conflicting: selected and masked
        else:
            fed[pin] = "mask"
    return fed


def validate_config(cfg: OverlayConfig) -> list[Violation]:
    """All invariant violations, each naming the offending cell and port."""
    out: list[Violation] = []
    shape = cfg.shape
    for rc in shape.cells():
        if rc not in cfg.cells:
            out.append(Violation("missing-cell", f"{rc}"))
    if len(cfg.cells) != shape.rows * shape.cols:
        extra = set(cfg.cells) - set(shape.cells())
        if extra:
            out.append(Violation("extra-cell", f"{sorted(extra)}"))

    for (r, c), cell in sorted(cfg.cells.items()):
        where = f"cell ({r},{c})"
        fed = _fed_pins(cell)
        if any(v == "both" for v in fed.values()):
            out.append(Violation("pin-conflict", f"{where}: pin both wired and masked"))
        if cell.mask is not None:
            if cell.fu_op is None:
                out.append(Violation("mask-without-fu", where))
            if not (INT32_MIN <= cell.mask[1] <= INT32_MAX):
                out.append(Violation("mask-range", f"{where}: {cell.mask[1]}"))
        if cell.fu_op is None:
            if fed and cell.mask is None:
                out.append(Violation("pins-without-fu", where))
        else:
            arity = OP_ARITY[cell.fu_op]
            needed = [Pin.IN1] if arity == 1 else [Pin.IN1, Pin.IN2]
            if cell.fu_op == OpCode.MUX:
                needed.append(Pin.SEL)
            for pin in needed:
                if pin not in fed:
                    out.append(Violation("unfed-pin", f"{where}: {pin.name}"))
            for pin in fed:
                if pin not in needed:
                    out.append(Violation("extra-pin", f"{where}: {pin.name}"))
        for d in Direction:
            sel = cell.out_sel[d]
            if sel is None:
                continue
            if sel == d:
                out.append(Violation("reflection", f"{where}: out {d.name} from in {d.name}"))
            if sel == FU and cell.fu_op is None:
                out.append(Violation("dangling-fu", f"{where}: out {d.name}"))

    # io map sanity
    for label, table in (("in", cfg.io_in), ("out", cfg.io_out)):
        tags = list(table.values())
        if len(tags) != len(set(tags)):
            out.append(Violation("tag-clash", f"duplicate {label} tags"))
        for (r, c, d) in table:
            if not shape.in_bounds(r, c) or shape.neighbor(r, c, d) is not None:
                out.append(Violation("not-border", f"io_{label} ({r},{c}) {d.name}"))
    for (r, c, d) in cfg.io_out:
        if shape.in_bounds(r, c) and cfg.cell(r, c).out_sel[d] is None:
            out.append(Violation("silent-output", f"io_out ({r},{c}) {d.name} is disabled"))

    if _routing_cycle(cfg):
        out.append(Violation("cycle", "routing graph has a cycle"))
        return out  # tracing below would not terminate meaningfully

    # every consumer must resolve to a border input or an FU, and consumed
    # border inputs must carry a stream tag
    used_border: set[tuple[int, int, Direction]] = set()

    def check_pin(r, c, d, what):
        try:
            origin = trace_port(cfg, (r, c), d)
        except UnroutedPort as exc:
            out.append(Violation("unrouted", f"{what}: {exc}"))
            return
        if isinstance(origin, BorderOrigin):
            used_border.add((origin.r, origin.c, origin.side))

    for (r, c), cell in sorted(cfg.cells.items()):
        for pin in Pin:
            d = cell.pin_select(pin)
            if d is not None:
                check_pin(r, c, d, f"cell ({r},{c}) {pin.name}")
        for d in Direction:
            sel = cell.out_sel[d]
            if isinstance(sel, Direction):
                check_pin(r, c, sel, f"cell ({r},{c}) out {d.name}")
    for port in used_border:
        if port not in cfg.io_in:
            r, c, d = port
            out.append(Violation("untagged-input", f"({r},{c}) {d.name}"))
    return out


def _routing_cycle(cfg: OverlayConfig) -> bool:
    """Detect cycles in the directed value-forwarding graph."""
    # node: ("in"|"out", r, c, d) or ("fu", r, c, None)
    def deps(node):
        kind, r, c, d = node
        cell = cfg.cell(r, c)
        if kind == "out":
            sel = cell.out_sel[d]
            if isinstance(sel, Direction):
                return [("in", r, c, sel)]
            if sel == FU:
                return [("fu", r, c, None)]
            return []
        if kind == "in":
            nb = cfg.shape.neighbor(r, c, d)
            if nb is None:
                return []
            return [("out", nb[0], nb[1], opposite(d))]
        pins = []
        for pin in Pin:
            sel = cell.pin_select(pin)
            if sel is not None:
                pins.append(("in", r, c, sel))
        return pins

    WHITE, GRAY, BLACK = 0, 1, 2
    color: dict = {}

    def visit(root) -> bool:
        if color.get(root, WHITE) != WHITE:
            return False
        stack = [(root, iter(deps(root)))]
        color[root] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for dep in it:
                state = color.get(dep, WHITE)
                if state == GRAY:
                    return True
                if state == WHITE:
                    color[dep] = GRAY
                    stack.append((dep, iter(deps(dep))))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()
        return False

    for (r, c) in cfg.shape.cells():
        for d in Direction:
            if visit(("out", r, c, d)):
                return True
        if visit(("fu", r, c, None)):
            return True
    return False


# -- serialization -----------------------------------------------------------------

_MAGIC = b"DFE1"
_NONE = 0xFF
_OUT_FU = 4


def serialize_config(cfg: OverlayConfig) -> bytes:
    """Little-endian binary form: header, R*C 13-byte cell records, io map."""
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<HH", cfg.shape.rows, cfg.shape.cols)
    for rc in cfg.shape.cells():
        cell = cfg.cells[rc]
        buf.append(_NONE if cell.fu_op is None else int(cell.fu_op))
        for pin_sel in (cell.fu_in1, cell.fu_in2, cell.fu_sel):
            buf.append(_NONE if pin_sel is None else int(pin_sel))
        if cell.mask is None:
            buf.append(_NONE)
            buf += struct.pack("<i", 0)
        else:
            buf.append(int(cell.mask[0]))
            buf += struct.pack("<i", cell.mask[1])
        for d in Direction:
            sel = cell.out_sel[d]
            if sel is None:
                buf.append(_NONE)
            elif sel == FU:
                buf.append(_OUT_FU)
            else:
                buf.append(int(sel))
    for table in (cfg.io_in, cfg.io_out):
        entries = sorted(table.items())
        buf += struct.pack("<I", len(entries))
        for (r, c, d), tag in entries:
            buf += struct.pack("<BHHI", int(d), r, c, tag)
    return bytes(buf)


def deserialize_config(data: bytes) -> OverlayConfig:
    if data[:4] != _MAGIC:
        raise ValueError("not an overlay config file")
    rows, cols = struct.unpack_from("<HH", data, 4)
    cfg = new_overlay(rows, cols)
    off = 8
    for rc in cfg.shape.cells():
        cell = cfg.cells[rc]
        fu_op = data[off]
        cell.fu_op = None if fu_op == _NONE else OpCode(fu_op)
        sels = []
        for i in range(3):
            raw = data[off + 1 + i]
            sels.append(None if raw == _NONE else Direction(raw))
        cell.fu_in1, cell.fu_in2, cell.fu_sel = sels
        mask_pin = data[off + 4]
        (mask_val,) = struct.unpack_from("<i", data, off + 5)
        if mask_pin != _NONE:
            cell.mask = (Pin(mask_pin), mask_val)
        for i, d in enumerate(Direction):
            raw = data[off + 9 + i]
            if raw == _NONE:
                cell.out_sel[d] = None
            elif raw == _OUT_FU:
                cell.out_sel[d] = FU
            else:
                cell.out_sel[d] = Direction(raw)
        off += 13
    for table in (cfg.io_in, cfg.io_out):
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        for _ in range(count):
            d, r, c, tag = struct.unpack_from("<BHHI", data, off)
            table[(r, c, Direction(d))] = tag
            off += 9
    if off != len(data):
        raise ValueError("trailing bytes in overlay config")
    return cfg


def config_to_text(cfg: OverlayConfig) -> str:
    """Human-readable dump of the non-empty cells and io bindings."""
    lines = [f"overlay {cfg.shape.rows}x{cfg.shape.cols}"]
    for (r, c), cell in sorted(cfg.cells.items()):
        if cell.is_empty():
            continue
        parts = [f"cell ({r},{c})"]
        if cell.fu_op is not None:
            pins = []
            for pin, sel in ((Pin.IN1, cell.fu_in1), (Pin.IN2, cell.fu_in2),
                             (Pin.SEL, cell.fu_sel)):
                if cell.mask is not None and cell.mask[0] == pin:
                    pins.append(f"{pin.name.lower()}=const:{cell.mask[1]}")
                elif sel is not None:
                    pins.append(f"{pin.name.lower()}={sel.name}")
            parts.append(f"op={cell.fu_op.name} " + " ".join(pins))
        outs = [f"{d.name}<-{sel.name if isinstance(sel, Direction) else sel}"
                for d, sel in cell.out_sel.items() if sel is not None]
        if outs:
            parts.append("out " + " ".join(outs))
        lines.append("  " + " | ".join(parts))
    for label, table in (("in", cfg.io_in), ("out", cfg.io_out)):
        for (r, c, d), tag in sorted(table.items()):
            lines.append(f"  io_{label} ({r},{c}) {d.name} tag={tag}")
    return "\n".join(lines) + "\n"


def config_to_dot(cfg: OverlayConfig) -> str:
    """Graphviz view: configured cells, routed connections, masked constants."""
    lines = ["digraph overlay {", "  rankdir=LR;"]
    for (r, c), cell in sorted(cfg.cells.items()):
        if cell.fu_op is None:
            continue
        lines.append(f'  c{r}_{c} [label="({r},{c})\\n{cell.fu_op.name}", shape=ellipse];')
        if cell.mask is not None:
            pin, value = cell.mask
            lines.append(f'  k{r}_{c} [label="{value}", shape=box, '
                         f'style=filled, fillcolor="palegreen"];')
            lines.append(f'  k{r}_{c} -> c{r}_{c} [label="{pin.name}"];')
    for (r, c, d), tag in sorted(cfg.io_in.items()):
        lines.append(f'  i{tag} [label="in {tag}", shape=box];')
    for (r, c, d), tag in sorted(cfg.io_out.items()):
        lines.append(f'  o{tag} [label="out {tag}", shape=box];')

    def origin_name(origin: Origin) -> str:
        if isinstance(origin, BorderOrigin):
            tag = cfg.io_in.get((origin.r, origin.c, origin.side))
            return f"i{tag}"
        return f"c{origin.r}_{origin.c}"

    for (r, c), cell in sorted(cfg.cells.items()):
        for pin in Pin:
            d = cell.pin_select(pin)
            if d is None:
                continue
            src = origin_name(trace_port(cfg, (r, c), d))
            lines.append(f'  {src} -> c{r}_{c} [label="{pin.name}"];')
    for (r, c, d), tag in sorted(cfg.io_out.items()):
        sel = cfg.cell(r, c).out_sel[d]
        if sel == FU:
            lines.append(f"  c{r}_{c} -> o{tag};")
        elif isinstance(sel, Direction):
            src = origin_name(trace_port(cfg, (r, c), sel))
            lines.append(f"  {src} -> o{tag};")
    lines.append("}")
    return "\n".join(lines) + "\n"
