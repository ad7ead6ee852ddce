"""Retrieval metrics, the lower-triangular results matrix, and run reports.

Matrix entries are fractions in [0, 1]; the JSON report presents
percentage points (x100). All aggregate continual-learning numbers are
functions of the MRR matrix alone.
"""

from __future__ import annotations

import json
from pathlib import Path

from .autograd import ContractError

REPORT_SCHEMA = "report_v1"


def _rank_of_first_gold(ranked, gold_keys, k: int) -> int:
    """1-based rank of the first entry containing a gold key, 0 if none in top-k.

    Entries may be single dockeys or collections of dockeys (identifier
    collisions make one decoded sequence stand for several documents).
    """
    gold = {gold_keys} if isinstance(gold_keys, str) else set(gold_keys)
    for pos, entry in enumerate(ranked[:k], start=1):
        keys = {entry} if isinstance(entry, str) else set(entry)
        if keys & gold:
            return pos
    return 0


def mrr_at_k(ranked, gold_keys, k: int = 10) -> float:
    """Reciprocal rank of the first gold within the top k, else 0."""
    if k < 1:
        raise ContractError("k must be >= 1")
    rank = _rank_of_first_gold(ranked, gold_keys, k)
    return 1.0 / rank if rank else 0.0


def hit_at_k(ranked, gold_keys, k: int = 10) -> float:
    """1 if any gold appears in the top k, else 0."""
    if k < 1:
        raise ContractError("k must be >= 1")
    return 1.0 if _rank_of_first_gold(ranked, gold_keys, k) else 0.0


class ResultsMatrix:
    """Lower-triangular session x slice performance matrix (MRR@10, Hit@10)."""

    def __init__(self):
        self._mrr: dict[tuple[int, int], float] = {}
        self._hit: dict[tuple[int, int], float] = {}

    def set_entry(self, session: int, slice_index: int, mrr: float, hit: float) -> None:
        if slice_index > session or slice_index < 0:
            raise ContractError("matrix is lower-triangular: need 0 <= slice <= session")
        for v in (mrr, hit):
            if not (0.0 <= v <= 1.0):
                raise ContractError("matrix entries are fractions in [0, 1]")
        self._mrr[(session, slice_index)] = float(mrr)
        self._hit[(session, slice_index)] = float(hit)

    def has_entry(self, session: int, slice_index: int) -> bool:
        return (session, slice_index) in self._mrr

    def mrr(self, session: int, slice_index: int) -> float:
        return self._mrr[(session, slice_index)]

    def hit(self, session: int, slice_index: int) -> float:
        return self._hit[(session, slice_index)]

    def last_complete_session(self) -> int:
        t = -1
        while all(self.has_entry(t + 1, s) for s in range(t + 2)):
            t += 1
        return t

    def entries(self):
        for key in sorted(self._mrr):
            yield key[0], key[1], self._mrr[key], self._hit[key]

    def to_csv(self, path: str | Path) -> None:
        lines = ["session,slice,mrr10,hit10"]
        for t, s, mrr, hit in self.entries():
            lines.append(f"{t},{s},{mrr!r},{hit!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def from_csv(path: str | Path) -> "ResultsMatrix":
        matrix = ResultsMatrix()
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != "session,slice,mrr10,hit10":
            raise ContractError(f"{path}: unexpected results header")
        for line in lines[1:]:
            if not line.strip():
                continue
            t, s, mrr, hit = line.split(",")
            matrix.set_entry(int(t), int(s), float(mrr), float(hit))
        return matrix


def _require_row(matrix: ResultsMatrix, n: int) -> None:
    for s in range(n + 1):
        if not matrix.has_entry(n, s):
            raise ContractError(f"matrix row {n} is incomplete at slice {s}")


def ap(matrix: ResultsMatrix, n: int) -> float:
    """Average MRR over all slices after the final session: mean of row n."""
    _require_row(matrix, n)
    return sum(matrix.mrr(n, s) for s in range(n + 1)) / (n + 1)


def bwt_signed(matrix: ResultsMatrix, n: int) -> float:
    """Signed backward transfer: mean over s < n of R[n][s] - R[s][s]."""
    if n < 1:
        raise ContractError("signed backward transfer needs n >= 1")
    _require_row(matrix, n)
    total = 0.0
    for s in range(n):
        total += matrix.mrr(n, s) - matrix.mrr(s, s)
    return total / n


def fwt_diag(matrix: ResultsMatrix, n: int) -> float:
    """Diagonal forward performance: mean of R[s][s] for s = 1..n (slice 0 excluded)."""
    if n < 1:
        raise ContractError("diagonal forward performance needs n >= 1")
    for s in range(1, n + 1):
        if not matrix.has_entry(s, s):
            raise ContractError(f"missing diagonal entry at session {s}")
    return sum(matrix.mrr(s, s) for s in range(1, n + 1)) / n


def build_report(matrix: ResultsMatrix, config_echo: dict, seed: int, timing_s: float) -> dict:
    """Aggregates in percentage points, recomputable from the matrix alone."""
    n = matrix.last_complete_session()
    if n < 1:
        raise ContractError("report needs at least sessions 0 and 1 evaluated")
    return {
        "schema": REPORT_SCHEMA,
        "units": "percentage_points",
        "sessions": n + 1,
        "ap": 100.0 * ap(matrix, n),
        "bwt_signed": 100.0 * bwt_signed(matrix, n),
        "fwt_diag": 100.0 * fwt_diag(matrix, n),
        "diagonal_mrr": [100.0 * matrix.mrr(s, s) for s in range(n + 1)],
        "diagonal_hit": [100.0 * matrix.hit(s, s) for s in range(n + 1)],
        "seed": seed,
        "timing_seconds": timing_s,
        "config": {k: config_echo[k] for k in sorted(config_echo)},
    }


def emit_report(
    matrix: ResultsMatrix,
    config_echo: dict,
    out_dir: str | Path,
    seed: int = 0,
    timing_s: float = 0.0,
) -> dict:
    """Write results.csv + report.json; returns the report dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrix.to_csv(out / "results.csv")
    report = build_report(matrix, config_echo, seed, timing_s)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def plot_report(matrix: ResultsMatrix, out_dir: str | Path) -> list[Path]:
    """Line chart of per-slice diagonals and a bar chart of the aggregates."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = matrix.last_complete_session()
    written = []

    fig, ax = plt.subplots(figsize=(5, 3.2))
    sessions = list(range(n + 1))
    ax.plot(sessions, [100 * matrix.mrr(s, s) for s in sessions], marker="o", label="MRR@10")
    ax.plot(sessions, [100 * matrix.hit(s, s) for s in sessions], marker="s", label="Hit@10")
    ax.set_xlabel("session (= slice)")
    ax.set_ylabel("diagonal performance (pp)")
    ax.legend()
    fig.tight_layout()
    diag_path = out / "diagonals.png"
    fig.savefig(diag_path)
    plt.close(fig)
    written.append(diag_path)

    if n >= 1:
        fig, ax = plt.subplots(figsize=(4, 3.2))
        names = ["AP", "FWT_diag", "BWT"]
        vals = [100 * ap(matrix, n), 100 * fwt_diag(matrix, n), 100 * bwt_signed(matrix, n)]
        ax.bar(names, vals)
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_ylabel("percentage points")
        fig.tight_layout()
        agg_path = out / "aggregates.png"
        fig.savefig(agg_path)
        plt.close(fig)
        written.append(agg_path)
    return written
