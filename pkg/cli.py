"""
cli.py — command-line entry point

WHY this file exists:
  One process runs one command over a script file (or a built-in model) and
  writes its results as JSON lines. This module only parses flags, wires
  them into config, calls the library and maps exceptions to exit codes.
  The numerical work lives in the library modules.

Command inventory:
  Command   Does                                              Handler
  ──────────────────────────────────────────────────────────────────────────
  run       apply a script to a state, sample it              cmd_run
  grad      ⟨O⟩ and its parameter gradient                    cmd_grad
  vqe       gradient-descent VQE on the Heisenberg chain      cmd_vqe
  bench     ns per gate application over a range of sizes     cmd_bench
  mat       build the operator matrix, dump it as COO         cmd_mat

Output contract:
  stdout  data only, one JSON object per line (or --out FILE)
  stderr  log lines and, on failure, one JSON error object
  exit    0 ok, 1 invalid flag or input / I/O failure, 2 script/parse error,
          3 resource cap, 4 unsupported, 5 bench scaling outside its band

Observables (grad):
  Sums of Pauli products with optional coefficients and 1-based qubits,
  e.g. "Z1*Z2 + 0.5*X1" or "-1.5*Y3", or the word "heisenberg".
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import time
from dataclasses import dataclass, field, fields

import numpy as np

import config
from autodiff import expect, expect_grad, faithful_grad
from bitstring import BitStr
from blocks import Block, X, Y, Z, add, apply, chain, mat, parameters, put, scale
from circuits import ground_energy, heisenberg, vqe_run
from errors import QbirError, ResourceError, ScalingError, ScriptError, ValidationError
from matrices import dump_coo, nnz
from register import (
    instruct, measure, norms, product_state, rand_state, save_state, zero_state,
)
from script import load_script

MAT_MAX_QUBITS = 20
BENCH_GATES = {
    # gate: (target locs, control locs, minimum register size)
    "X":       (("X", (2,)), (), 2),
    "H":       (("H", (2,)), (), 2),
    "CNOT":    (("X", (3,)), (2,), 3),
    "Toffoli": (("X", (1,)), (2, 3), 3),
}


# ── Run configuration ─────────────────────────────────────────────────────────
@dataclass
class RunConfig:
    seed:       int = field(default_factory=lambda: config.DEFAULT_SEED)
    shots:      int = field(default_factory=lambda: config.DEFAULT_SHOTS)
    max_qubits: int = field(default_factory=lambda: config.QUBIT_CAP)
    threads:    int = field(default_factory=lambda: config.THREADS)
    out:        str | None = None
    log_level:  str = field(default_factory=lambda: config.LOG_LEVEL)

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> RunConfig:
        given = {f.name: getattr(args, f.name) for f in fields(cls) if hasattr(args, f.name)}
        return cls(**given)

    def install(self) -> None:
        """Push overrides into config; library code reads them at call time."""
        if self.max_qubits < 1 or self.threads < 1 or self.shots < 1:
            raise ValidationError("--max-qubits, --threads and --shots must be positive")
        config.QUBIT_CAP = self.max_qubits
        config.THREADS   = self.threads


class _Writer:
    def __init__(self, path: str | None):
        self.fh = open(path, "w", encoding="utf-8") if path else sys.stdout

    def emit(self, obj: dict) -> None:
        self.fh.write(json.dumps(obj) + "\n")

    def close(self) -> None:
        if self.fh is not sys.stdout:
            self.fh.close()
        else:
            self.fh.flush()


# ── Observables ───────────────────────────────────────────────────────────────
_PAULIS = {"X": X, "Y": Y, "Z": Z}
_FACTOR_RE = re.compile(r"\s*([XYZ])\s*(\d+)\s*$")


def _term(text: str, n: int, sign: float) -> Block:
    coef, ops, used = sign, [], set()
    for factor in text.split("*"):
        factor = factor.strip()
        m = _FACTOR_RE.match(factor)
        if m:
            q = int(m.group(2))
            if not 1 <= q <= n:
                raise ValidationError(f"observable qubit {q} outside 1..{n}")
            if q in used:
                raise ValidationError(f"observable term '{text.strip()}' uses qubit {q} twice")
            used.add(q)
            ops.append(put(n, q, _PAULIS[m.group(1)]))
            continue
        try:
            coef *= float(factor)
        except ValueError:
            raise ValidationError(f"cannot read observable factor '{factor}'") from None
    if not ops:
        raise ValidationError(f"observable term '{text.strip()}' has no Pauli factor")
    body = ops[0] if len(ops) == 1 else chain(n, ops)
    return body if coef == 1 else scale(coef, body)


def parse_observable(text: str, n: int) -> Block:
    """'heisenberg' or a sum of coefficient * Pauli-product terms."""
    if text.strip().lower() == "heisenberg":
        return heisenberg(n)
    parts = re.split(r"(?<![eE])([+-])", text)
    terms, sign = [], 1.0
    for part in parts:
        if part in ("+", "-"):
            sign = -sign if part == "-" else sign
            continue
        if not part.strip():
            continue
        terms.append(_term(part, n, sign))
        sign = 1.0
    if not terms:
        raise ValidationError(f"empty observable '{text}'")
    return terms[0] if len(terms) == 1 else add(terms, nqubits=n)


# ── Commands ──────────────────────────────────────────────────────────────────
def _initial_state(bits: str | None, n: int):
    if bits is None:
        return zero_state(n)
    b = BitStr.parse(bits)
    if b.nbits != n:
        raise ValidationError(f"--state has {b.nbits} bits, circuit has {n} qubits")
    return product_state(b)


def cmd_run(args, cfg: RunConfig, out: _Writer) -> None:
    circuit = load_script(args.script)
    reg = _initial_state(args.state, circuit.nqubits)
    apply(reg, circuit)
    outcome = measure(reg, cfg.shots, rng=config.make_rng(cfg.seed))
    for sample, batch in zip(outcome.samples, outcome.batches):
        out.emit({"sample": sample.digits, "batch": batch})
    out.emit({"norm": float(norms(reg)[0])})
    if args.save_state:
        save_state(reg, args.save_state)


def cmd_grad(args, cfg: RunConfig, out: _Writer) -> None:
    circuit = load_script(args.script)
    n = circuit.nqubits
    obs = parse_observable(args.observable, n)
    reg = _initial_state(args.state, n)
    result = {"params": parameters(circuit).tolist()}
    if args.mode in ("reverse", "both"):
        rev = expect_grad(obs, (reg, circuit))
        result["energy"] = float(rev.value.sum())
        result["grads"] = rev.param_grads.tolist()
    if args.mode in ("shift", "both"):
        shifted = faithful_grad(obs, (reg, circuit))
        key = "grads" if args.mode == "shift" else "grads_shift"
        result[key] = shifted.tolist()
        if args.mode == "both":
            diff = np.abs(np.asarray(result["grads"]) - shifted)
            result["max_abs_diff"] = float(diff.max()) if diff.size else 0.0
    if "energy" not in result:
        result["energy"] = float(expect(obs, (reg, circuit)).sum())
    out.emit(result)


def cmd_vqe(args, cfg: RunConfig, out: _Writer) -> None:
    report = vqe_run(args.qubits, args.depth, args.iters, args.lr, seed=cfg.seed)
    result = {"energies": report.energies, "final_energy": report.final_energy}
    if args.qubits <= config.VQE_EXACT_MAX_QUBITS:
        exact = ground_energy(heisenberg(args.qubits))
        result["ground_energy"] = exact
        result["relative_gap"] = abs(report.final_energy - exact) / abs(exact)
    out.emit(result)


def _parse_range(text: str) -> range:
    m = re.fullmatch(r"\s*(\d+)\s*(?:\.\.\s*(\d+))?\s*", text)
    if not m:
        raise ValidationError(f"--qubits expects 'lo..hi' or 'n', got '{text}'")
    lo = int(m.group(1))
    hi = int(m.group(2)) if m.group(2) else lo
    if hi < lo:
        raise ValidationError(f"empty qubit range {text}")
    return range(lo, hi + 1)


def cmd_bench(args, cfg: RunConfig, out: _Writer) -> None:
    (tag, locs), ctrl_locs, minimum = BENCH_GATES[args.gate]
    sizes = _parse_range(args.qubits)
    if sizes.start < minimum:
        raise ValidationError(f"{args.gate} benchmark needs at least {minimum} qubits")
    if sizes.stop - 1 > config.QUBIT_CAP:
        raise ResourceError(f"{sizes.stop - 1} qubits exceeds the cap of {config.QUBIT_CAP}")
    rng = config.make_rng(cfg.seed)
    timings: dict[int, int] = {}
    for n in sizes:
        reg = rand_state(n, rng=rng)
        best = None
        for _ in range(args.reps):
            start = time.perf_counter_ns()
            instruct(reg, tag, locs, ctrl_locs, (1,) * len(ctrl_locs))
            elapsed = time.perf_counter_ns() - start
            best = elapsed if best is None else min(best, elapsed)
        timings[n] = best
        out.emit({"gate": args.gate, "qubits": n, "ns": best, "reps": args.reps})
        logging.info(f"cli: bench {args.gate} n={n} {best} ns")
    if len(timings) > 1:
        lo, hi = sizes.start, sizes.stop - 1
        growth = 2 ** (hi - lo)
        band = (growth / 16, 4 * growth)
        ratio = timings[hi] / max(timings[lo], 1)
        ok = band[0] <= ratio <= band[1]
        out.emit({"gate": args.gate, "ratio": ratio, "band": list(band), "scaling_ok": ok})
        if not ok:
            raise ScalingError(f"bench ratio {ratio:.2f} for n={lo}..{hi} outside {band}")


def cmd_mat(args, cfg: RunConfig, out: _Writer) -> None:
    if args.hamiltonian:
        if args.qubits is None:
            raise ValidationError("--hamiltonian needs --qubits")
        block = heisenberg(args.qubits)
    elif args.script:
        block = load_script(args.script)
    else:
        raise ValidationError("mat needs a script path or --hamiltonian heisenberg")
    if block.nqubits > MAT_MAX_QUBITS:
        raise ResourceError(f"matrix of {block.nqubits} qubits exceeds {MAT_MAX_QUBITS}")
    start = time.perf_counter()
    m = mat(block)
    seconds = time.perf_counter() - start
    result = {"dim": m.dim, "nnz": nnz(m), "format": m.tag, "seconds": seconds}
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8") as fh:
            dump_coo(m, fh)
        result["out"] = cfg.out
    logging.info(f"cli: built {m.dim}-dim {m.tag} matrix in {seconds:.3f}s")
    sys.stdout.write(json.dumps(result) + "\n")


COMMANDS = {
    "run":   cmd_run,
    "grad":  cmd_grad,
    "vqe":   cmd_vqe,
    "bench": cmd_bench,
    "mat":   cmd_mat,
}


# ── Argument parsing ──────────────────────────────────────────────────────────
def _common_flags() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset after it.
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help=f"PRNG seed (default {config.DEFAULT_SEED})")
    common.add_argument("--shots", type=int, help=f"measurement shots (default {config.DEFAULT_SHOTS})")
    common.add_argument("--max-qubits", dest="max_qubits", type=int,
                        help=f"register size cap (default {config.QUBIT_CAP})")
    common.add_argument("--threads", type=int, help=f"kernel worker threads (default {config.THREADS})")
    common.add_argument("--out", help="write data lines here; for mat, the COO dump path")
    common.add_argument("--log-level", dest="log_level", help=f"logging level (default {config.LOG_LEVEL})")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog="qbir",
        description="Block-IR state-vector simulator",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[common],
        epilog=(
            "Examples:\n"
            "  qbir run bell.yqs --shots 4 --seed 7\n"
            "  qbir grad ansatz.yqs --observable 'Z1*Z2 + 0.5*X1' --mode both\n"
            "  qbir vqe --qubits 6 --depth 8 --iters 200 --lr 0.01\n"
            "  qbir bench --gate X --qubits 10..16 --reps 5\n"
            "  qbir mat --hamiltonian heisenberg --qubits 16 --out h16.coo"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="apply a script and sample")
    run.add_argument("script")
    run.add_argument("--state", help="initial basis state, qubit 1 rightmost (e.g. 0010)")
    run.add_argument("--save-state", dest="save_state", help="write the final register here")

    grad = sub.add_parser("grad", parents=[common], help="expectation gradient")
    grad.add_argument("script")
    grad.add_argument("--observable", default="heisenberg")
    grad.add_argument("--mode", choices=("reverse", "shift", "both"), default="reverse")
    grad.add_argument("--state", help="initial basis state")

    vqe = sub.add_parser("vqe", parents=[common], help="VQE on the Heisenberg chain")
    vqe.add_argument("--qubits", type=int, required=True)
    vqe.add_argument("--depth", type=int, required=True)
    vqe.add_argument("--iters", type=int, default=100)
    vqe.add_argument("--lr", type=float, default=0.01)

    bench = sub.add_parser("bench", parents=[common], help="single-gate timings")
    bench.add_argument("--gate", choices=tuple(BENCH_GATES), default="X")
    bench.add_argument("--qubits", default="10..16", help="size range lo..hi")
    bench.add_argument("--reps", type=int, default=5)

    mat_cmd = sub.add_parser("mat", parents=[common], help="operator matrix as COO")
    mat_cmd.add_argument("script", nargs="?")
    mat_cmd.add_argument("--hamiltonian", choices=("heisenberg",))
    mat_cmd.add_argument("--qubits", type=int)
    return parser


def _report(exc: Exception, kind: str, code: int) -> int:
    payload = {"error": getattr(exc, "message", str(exc)), "kind": kind}
    if isinstance(exc, ScriptError):
        payload["line"], payload["column"] = exc.line, exc.column
    sys.stderr.write(json.dumps(payload) + "\n")
    logging.error(f"cli: {kind} error: {exc}")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = RunConfig.from_args(args)
    config.LOG_LEVEL = cfg.log_level.upper()
    logging.basicConfig(
        level=config.log_level(),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    logging.info(f"cli: {args.command} started (seed {cfg.seed}, threads {cfg.threads})")
    out = _Writer(cfg.out if args.command != "mat" else None)
    try:
        cfg.install()
        COMMANDS[args.command](args, cfg, out)
    except QbirError as exc:
        return _report(exc, exc.kind, exc.exit_code)
    except OSError as exc:
        return _report(exc, "io", 1)
    finally:
        out.close()
    logging.info(f"cli: {args.command} finished")
    return 0


if __name__ == "__main__":
    sys.exit(main())
