"""Program validation: SSA discipline, dominance, typing, and provenance."""

from __future__ import annotations

from dataclasses import dataclass, field

from .analysis import CfgInfo
from .ir import (
    INT_RESULT_OPS,
    PTR_RESULT_OPS,
    TERMINATORS,
    Function,
    Instr,
    Program,
)


@dataclass
class FunctionInfo:
    fn: Function
    cfg: CfgInfo
    types: dict = field(default_factory=dict)        # value -> 'int'|'ptr'
    provenance: dict = field(default_factory=dict)   # ptr value -> (origin, base)
    defs: dict = field(default_factory=dict)         # value -> Instr | 'param'


class ValidationError(Exception):
    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


def validate(program: Program) -> list[str]:
    """Return diagnostics; empty means the program is well-formed."""
    _, diagnostics = analyze(program)
    return diagnostics


def analyze(program: Program) -> tuple[dict[str, FunctionInfo], list[str]]:
    diags: list[str] = []
    infos: dict[str, FunctionInfo] = {}

    if program.entry not in program.functions:
        diags.append(f"missing entry function @{program.entry}")
    else:
        entry = program.functions[program.entry]
        for name, ty in entry.params:
            if ty != "int":
                diags.append(
                    f"entry parameter %{name} must be int (got {ty})")

    for fn in program.functions.values():
        infos[fn.name] = _collect_function(fn, program, diags)
    if any(fn.name not in infos for fn in program.functions.values()):
        return infos, diags

    _infer_types(program, infos, diags)
    for info in infos.values():
        _check_uses(info, program, infos, diags)
        _assign_provenance(info)
    return infos, diags


def _collect_function(fn: Function, program: Program,
                      diags: list[str]) -> FunctionInfo:
    defs: dict = {}
    for name, _ty in fn.params:
        if name in defs:
            diags.append(f"@{fn.name}: duplicate parameter %{name}")
        defs[name] = "param"

    for block in fn.blocks:
        if not block.instrs or block.instrs[-1].op not in TERMINATORS:
            diags.append(f"@{fn.name} ^{block.label}: missing terminator")
        seen_non_phi = False
        for idx, instr in enumerate(block.instrs):
            if instr.op in TERMINATORS and idx != len(block.instrs) - 1:
                diags.append(
                    f"@{fn.name} ^{block.label}: terminator not last "
                    f"(line {instr.line})")
            if instr.op == "phi":
                if seen_non_phi:
                    diags.append(
                        f"@{fn.name} ^{block.label}: phi after non-phi "
                        f"(line {instr.line})")
            else:
                seen_non_phi = True
            if instr.dest is not None:
                if instr.dest in defs:
                    diags.append(
                        f"@{fn.name}: value %{instr.dest} defined twice "
                        f"(line {instr.line})")
                defs[instr.dest] = instr

    labels = {b.label for b in fn.blocks}
    for instr in fn.instructions():
        for label in instr.labels:
            if label not in labels:
                diags.append(
                    f"@{fn.name}: branch to unknown block ^{label} "
                    f"(line {instr.line})")
        if instr.op == "gaddr" and program.global_named(instr.callee) is None:
            diags.append(f"@{fn.name}: unknown global @{instr.callee} "
                         f"(line {instr.line})")
        if instr.op == "call" and instr.callee not in program.functions:
            diags.append(f"@{fn.name}: call to unknown function "
                         f"@{instr.callee} (line {instr.line})")
        if instr.op == "extern" and instr.callee not in program.externs:
            diags.append(f"@{fn.name}: undeclared extern @{instr.callee} "
                         f"(line {instr.line})")

    cfg = CfgInfo(fn)
    for block in fn.blocks:
        if block.label not in cfg.reachable:
            diags.append(f"@{fn.name} ^{block.label}: unreachable block")
    return FunctionInfo(fn=fn, cfg=cfg, defs=defs)


def _result_type(instr: Instr, types: dict, ret_types: dict,
                 program: Program):
    if instr.op in PTR_RESULT_OPS:
        return "ptr"
    if instr.op in INT_RESULT_OPS:
        return "int"
    if instr.op in ("phi", "select"):
        operands = ([v for v, _ in instr.incomings] if instr.op == "phi"
                    else instr.operands[1:])
        for v in operands:
            if isinstance(v, str) and v in types:
                return types[v]
        if all(not isinstance(v, str) for v in operands):
            return "int"
        return None
    if instr.op == "call":
        return ret_types.get(instr.callee)
    if instr.op == "extern":
        return "ptr" if program.externs.get(instr.callee) == "alloc" else "int"
    return None


def _infer_types(program: Program, infos: dict[str, FunctionInfo],
                 diags: list[str]) -> None:
    ret_types: dict = {}
    changed = True
    while changed:
        changed = False
        for info in infos.values():
            types = info.types
            for name, ty in info.fn.params:
                if types.get(name) != ty:
                    types[name] = ty
                    changed = True
            for instr in info.fn.instructions():
                if instr.dest is None:
                    continue
                ty = _result_type(instr, types, ret_types, program)
                if ty is not None and types.get(instr.dest) != ty:
                    types[instr.dest] = ty
                    changed = True
                if instr.op == "ret":
                    continue
            rt = None
            for instr in info.fn.instructions():
                if instr.op != "ret" or not instr.operands:
                    continue
                v = instr.operands[0]
                if isinstance(v, str):
                    rt = rt or types.get(v)
                else:
                    rt = rt or "int"
            if rt is not None and ret_types.get(info.fn.name) != rt:
                ret_types[info.fn.name] = rt
                changed = True
    # Anything still untyped defaults to int (e.g. a phi of literals only).
    for info in infos.values():
        for instr in info.fn.instructions():
            if instr.dest is not None and instr.dest not in info.types:
                info.types[instr.dest] = "int"


def _type_of(info: FunctionInfo, v):
    if isinstance(v, str):
        return info.types.get(v)
    return "literal"


def _expect(info: FunctionInfo, instr: Instr, v, want: str,
            what: str, diags: list[str]) -> None:
    ty = _type_of(info, v)
    if ty == "literal":
        return  # literals are polymorphic (null doubles as the zero pointer)
    if ty != want:
        diags.append(f"@{info.fn.name}: {what} of {instr.op} must be {want}, "
                     f"got {ty} (line {instr.line})")


def _check_uses(info: FunctionInfo, program: Program,
                infos: dict[str, FunctionInfo], diags: list[str]) -> None:
    fn, cfg = info.fn, info.cfg
    blockmap = fn.blockmap()
    for block in fn.blocks:
        for instr in block.instrs:
            for v in instr.values_read():
                if isinstance(v, str) and v not in info.defs:
                    diags.append(f"@{fn.name}: use of undefined value %{v} "
                                 f"(line {instr.line})")
            if block.label not in cfg.reachable:
                continue
            _check_dominance(info, block.label, instr, blockmap, diags)
            _check_instr_types(info, instr, program, infos, diags)
        if block.label in cfg.reachable:
            for instr in block.instrs:
                if instr.op == "phi":
                    want = sorted(cfg.pred[block.label])
                    got = sorted(lbl for _, lbl in instr.incomings)
                    if want != got:
                        diags.append(
                            f"@{fn.name} ^{block.label}: phi incomings "
                            f"{got} do not match predecessors {want} "
                            f"(line {instr.line})")


def _check_dominance(info: FunctionInfo, label: str, instr: Instr,
                     blockmap: dict, diags: list[str]) -> None:
    cfg = info.cfg
    if instr.op == "phi":
        for v, pred_label in instr.incomings:
            if not isinstance(v, str):
                continue
            d = info.defs.get(v)
            if d is None or d == "param" or pred_label not in blockmap:
                continue
            pred_term = blockmap[pred_label].instrs[-1]
            if d is not pred_term and not cfg.dominates(d, pred_term):
                diags.append(
                    f"@{info.fn.name}: %{v} does not dominate its phi edge "
                    f"from ^{pred_label} (line {instr.line})")
        return
    for v in instr.values_read():
        if not isinstance(v, str):
            continue
        d = info.defs.get(v)
        if d is None or d == "param":
            continue
        if not cfg.dominates(d, instr):
            diags.append(f"@{info.fn.name}: use of %{v} not dominated by its "
                         f"definition (line {instr.line})")


def _check_instr_types(info: FunctionInfo, instr: Instr, program: Program,
                       infos: dict[str, FunctionInfo],
                       diags: list[str]) -> None:
    op = instr.op
    if op in ("alloc", "alloca_dyn"):
        _expect(info, instr, instr.operands[0], "int", "size", diags)
    elif op == "gep":
        _expect(info, instr, instr.operands[0], "ptr", "base", diags)
        for idx, _scale in instr.gep_terms:
            _expect(info, instr, idx, "int", "index", diags)
    elif op in ("load", "loadp"):
        _expect(info, instr, instr.operands[0], "ptr", "address", diags)
    elif op == "store":
        _expect(info, instr, instr.operands[0], "ptr", "address", diags)
        _expect(info, instr, instr.operands[1], "int", "value", diags)
    elif op == "storep":
        _expect(info, instr, instr.operands[0], "ptr", "address", diags)
        _expect(info, instr, instr.operands[1], "ptr", "value", diags)
    elif op in ("icmp", "add", "sub", "mul"):
        for v in instr.operands:
            _expect(info, instr, v, "int", "operand", diags)
    elif op in ("ptrcmp", "ptrsub"):
        for v in instr.operands:
            _expect(info, instr, v, "ptr", "operand", diags)
    elif op in ("mask", "free"):
        _expect(info, instr, instr.operands[0], "ptr", "operand", diags)
    elif op == "select":
        _expect(info, instr, instr.operands[0], "int", "condition", diags)
    elif op == "condbr":
        _expect(info, instr, instr.operands[0], "int", "condition", diags)
    elif op == "phi":
        tys = {_type_of(info, v) for v, _ in instr.incomings} - {"literal"}
        if len(tys) > 1:
            diags.append(f"@{info.fn.name}: phi mixes {sorted(tys)} "
                         f"(line {instr.line})")
    elif op == "call":
        callee = program.functions.get(instr.callee)
        if callee is None:
            return
        if len(instr.operands) != len(callee.params):
            diags.append(f"@{info.fn.name}: call to @{instr.callee} with "
                         f"{len(instr.operands)} args, expected "
                         f"{len(callee.params)} (line {instr.line})")
            return
        for v, (_pname, pty) in zip(instr.operands, callee.params):
            _expect(info, instr, v, pty, "argument", diags)


def _assign_provenance(info: FunctionInfo) -> None:
    prov = info.provenance
    for name, ty in info.fn.params:
        if ty == "ptr":
            prov[name] = ("param", None)
    for instr in info.fn.instructions():
        if instr.dest is None or info.types.get(instr.dest) != "ptr":
            continue
        op = instr.op
        if op in ("alloc", "stackalloc", "alloca_dyn"):
            prov[instr.dest] = ("alloc", None)
        elif op == "gaddr":
            prov[instr.dest] = ("global", instr.callee)
        elif op in ("loadp", "extern", "call"):
            prov[instr.dest] = ("loaded", None)
        elif op == "gep":
            base = instr.operands[0]
            prov[instr.dest] = ("derived", base if isinstance(base, str) else None)
        elif op == "phi":
            first = next((v for v, _ in instr.incomings if isinstance(v, str)),
                         None)
            prov[instr.dest] = ("derived", first)
        elif op == "select":
            first = next((v for v in instr.operands[1:] if isinstance(v, str)),
                         None)
            prov[instr.dest] = ("derived", first)
        elif op == "mask":
            base = instr.operands[0]
            prov[instr.dest] = ("derived", base if isinstance(base, str) else None)


def require_valid(program: Program) -> dict[str, FunctionInfo]:
    infos, diags = analyze(program)
    if diags:
        raise ValidationError(diags)
    return infos
