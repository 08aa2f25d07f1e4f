"""Run ledgers and their delimited / plotted renderings.

The CSV schema is fixed; floats are written with repr so they round-trip
exactly and identical runs produce identical bytes (wallclock aside).
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

CSV_HEADER = (
    "step",
    "epoch",
    "student_map50",
    "teacher_map50",
    "mean_uncertainty",
    "teacher_updates",
    "student_retrains",
    "wallclock_s",
)


@dataclass
class LedgerRow:
    step: int
    epoch: int
    student_map50: float
    teacher_map50: float
    mean_uncertainty: float
    teacher_updates: int
    student_retrains: int
    wallclock_s: float


@dataclass
class RunLedger:
    rows: list = field(default_factory=list)

    def append(self, row: LedgerRow):
        if self.rows:
            last = self.rows[-1]
            if row.step <= last.step:
                raise ValueError("ledger steps must strictly increase")
            if (
                row.teacher_updates < last.teacher_updates
                or row.student_retrains < last.student_retrains
            ):
                raise ValueError("ledger counters must be non-decreasing")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    @property
    def final(self) -> LedgerRow:
        if not self.rows:
            raise ValueError("empty ledger")
        return self.rows[-1]


def write_ledger_csv(ledger: RunLedger, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in ledger.rows:
            w.writerow(
                [
                    r.step,
                    r.epoch,
                    repr(float(r.student_map50)),
                    repr(float(r.teacher_map50)),
                    repr(float(r.mean_uncertainty)),
                    r.teacher_updates,
                    r.student_retrains,
                    repr(float(r.wallclock_s)),
                ]
            )


def read_ledger_csv(path) -> RunLedger:
    ledger = RunLedger()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected ledger header {header}")
        for row in reader:
            vals = dict(zip(CSV_HEADER, row))
            ledger.append(
                LedgerRow(
                    step=int(vals["step"]),
                    epoch=int(vals["epoch"]),
                    student_map50=float(vals["student_map50"]),
                    teacher_map50=float(vals["teacher_map50"]),
                    mean_uncertainty=float(vals["mean_uncertainty"]),
                    teacher_updates=int(vals["teacher_updates"]),
                    student_retrains=int(vals["student_retrains"]),
                    wallclock_s=float(vals["wallclock_s"]),
                )
            )
    return ledger


@dataclass
class EmitResult:
    csv_path: Path
    figure_path: Path
    n_rows: int
    final_teacher_updates: int
    final_student_retrains: int


def emit_curves(ledger: RunLedger, out_dir, basename="run", make_figure=True) -> EmitResult:
    """Write ledger.csv and a self-contained SVG of the run.

    Top panel: student and teacher mAP@0.5 against step.  Bottom panel:
    cumulative teacher updates and student retrains (the event markers) with
    mean uncertainty on a twin axis.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{basename}.csv"
    write_ledger_csv(ledger, csv_path)

    figure_path = out_dir / f"{basename}.svg"
    if make_figure:
        steps = [r.step for r in ledger.rows]
        fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
        ax0.plot(steps, [r.student_map50 for r in ledger.rows], label="student", lw=1.5)
        ax0.plot(steps, [r.teacher_map50 for r in ledger.rows], label="teacher", lw=1.5)
        ax0.set_ylabel("mAP@0.5")
        ax0.set_ylim(0, 1)
        ax0.legend(loc="lower left", frameon=False)
        ax0.grid(alpha=0.3)

        ax1.step(
            steps,
            [r.teacher_updates for r in ledger.rows],
            where="post",
            label="teacher updates",
        )
        ax1.step(
            steps,
            [r.student_retrains for r in ledger.rows],
            where="post",
            label="student retrains",
        )
        ax1.set_xlabel("step")
        ax1.set_ylabel("cumulative events")
        ax1.grid(alpha=0.3)
        ax2 = ax1.twinx()
        ax2.plot(
            steps,
            [r.mean_uncertainty for r in ledger.rows],
            color="tab:red",
            lw=1.0,
            label="uncertainty",
        )
        ax2.set_ylabel("mean uncertainty", color="tab:red")
        lines0, labels0 = ax1.get_legend_handles_labels()
        lines1, labels1 = ax2.get_legend_handles_labels()
        ax1.legend(lines0 + lines1, labels0 + labels1, loc="upper left", frameon=False)
        fig.tight_layout()
        fig.savefig(figure_path, format="svg")
        plt.close(fig)

    final = ledger.final
    return EmitResult(
        csv_path=csv_path,
        figure_path=figure_path if make_figure else None,
        n_rows=len(ledger),
        final_teacher_updates=final.teacher_updates,
        final_student_retrains=final.student_retrains,
    )
