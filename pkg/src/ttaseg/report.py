"""Metrics CSV emission, aggregation, significance testing, report rendering."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import DependencyError
from .metrics import MetricsRecord, permutation_test

METRICS_HEADER = ["subject", "domain", "method", "label", "dice", "hd95", "flags"]


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    """One row per (subject, method, label); sorted for byte-stable output."""
    rows = []
    for r in records:
        for k in sorted(r.dice_per_label):
            h = r.hd95_per_label.get(k)
            flags = ";".join(f for f in r.flags if f.endswith(f"label{k}"))
            rows.append([r.subject, r.domain, r.method, k, repr(r.dice_per_label[k]),
                         "" if h is None else repr(h), flags])
    rows.sort(key=lambda row: (row[2], row[1], row[0], row[3]))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)


def read_metrics_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing metrics file: {path}")
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def per_subject_mean_dice(rows: list[dict]) -> dict:
    """(method, domain, subject) -> mean foreground Dice from raw label rows."""
    acc = defaultdict(list)
    for r in rows:
        acc[(r["method"], r["domain"], r["subject"])].append(float(r["dice"]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean Dice / HD95 per (method, domain); undefined HD95 rows are excluded and counted."""
    dice_acc = defaultdict(list)
    hd_acc = defaultdict(list)
    hd_missing = defaultdict(int)
    subjects = defaultdict(set)
    for r in rows:
        key = (r["method"], r["domain"])
        dice_acc[key].append(float(r["dice"]))
        subjects[key].add(r["subject"])
        if r["hd95"]:
            hd_acc[key].append(float(r["hd95"]))
        else:
            hd_missing[key] += 1
    out = []
    for key in sorted(dice_acc):
        method, domain = key
        out.append(
            {
                "method": method,
                "domain": domain,
                "mean_dice": float(np.mean(dice_acc[key])),
                "mean_hd95": float(np.mean(hd_acc[key])) if hd_acc[key] else None,
                "n_subjects": len(subjects[key]),
                "n_hd95_undefined": hd_missing[key],
            }
        )
    return out


def significance(rows: list[dict], comparisons, n_perm: int, seed: int) -> list[dict]:
    """Paired permutation tests between methods on every domain they share."""
    per_subject = per_subject_mean_dice(rows)
    by_md = defaultdict(dict)
    for (method, domain, subject), v in per_subject.items():
        by_md[(method, domain)][subject] = v

    out = []
    for method_a, method_b in comparisons:
        domains = sorted(
            {d for (m, d) in by_md if m == method_a} & {d for (m, d) in by_md if m == method_b}
        )
        for domain in domains:
            sa = by_md[(method_a, domain)]
            sb = by_md[(method_b, domain)]
            shared = sorted(set(sa) & set(sb))
            if len(shared) < 2:
                continue
            x = np.array([sa[s] for s in shared])
            y = np.array([sb[s] for s in shared])
            p = permutation_test(x, y, n_perm=n_perm, seed=seed)
            out.append(
                {
                    "domain": domain,
                    "method_a": method_a,
                    "method_b": method_b,
                    "mean_diff": float(np.mean(x - y)),
                    "p_value": p,
                    "n_permutations": n_perm,
                    "n_subjects": len(shared),
                }
            )
    return out


def write_results(report_dir, agg: list[dict], sig: list[dict]) -> None:
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)

    with open(report_dir / "results.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "domain", "mean_dice", "mean_hd95", "n_subjects", "n_hd95_undefined"])
        for a in agg:
            w.writerow([
                a["method"], a["domain"], repr(a["mean_dice"]),
                "" if a["mean_hd95"] is None else repr(a["mean_hd95"]),
                a["n_subjects"], a["n_hd95_undefined"],
            ])

    with open(report_dir / "significance.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["domain", "method_a", "method_b", "mean_diff", "p_value", "n_permutations", "n_subjects"])
        for s in sig:
            w.writerow([s["domain"], s["method_a"], s["method_b"], repr(s["mean_diff"]),
                        repr(s["p_value"]), s["n_permutations"], s["n_subjects"]])

    (report_dir / "results.txt").write_text(render_text_table(agg, sig))


def render_text_table(agg: list[dict], sig: list[dict]) -> str:
    domains = sorted({a["domain"] for a in agg})
    methods = sorted({a["method"] for a in agg})
    cell = {(a["method"], a["domain"]): a for a in agg}

    def table(title, getter, fmt):
        width = max(12, max((len(m) for m in methods), default=0) + 2)
        lines = [title, "-" * len(title)]
        header = "method".ljust(width) + "".join(d.rjust(12) for d in domains)
        lines.append(header)
        for m in methods:
            row = m.ljust(width)
            for d in domains:
                a = cell.get((m, d))
                v = getter(a) if a else None
                row += (fmt % v if v is not None else "-").rjust(12)
            lines.append(row)
        return lines

    lines = table("Mean foreground Dice", lambda a: a["mean_dice"], "%.4f")
    lines.append("")
    lines += table("Mean HD95 (mm)", lambda a: a["mean_hd95"], "%.3f")
    if sig:
        lines.append("")
        lines.append("Paired permutation tests (two-sided, * marks p < 0.01)")
        lines.append("-" * 54)
        for s in sig:
            star = " *" if s["p_value"] < 0.01 else ""
            lines.append(
                f"{s['domain']}: {s['method_a']} vs {s['method_b']}: "
                f"mean diff {s['mean_diff']:+.4f}, p = {s['p_value']:.6g} "
                f"(n = {s['n_subjects']}, {s['n_permutations']} permutations){star}"
            )
    lines.append("")
    return "\n".join(lines)


def collect_convergence(predictions_dir, report_dir) -> list[Path]:
    """Copy per-subject adaptation traces into the report directory."""
    predictions_dir = Path(predictions_dir)
    report_dir = Path(report_dir)
    out = []
    if not predictions_dir.exists():
        return out
    conv = report_dir / "convergence"
    conv.mkdir(parents=True, exist_ok=True)
    for trace in sorted(predictions_dir.glob("*/*/*.trace.csv")):
        method = trace.parent.parent.name
        domain = trace.parent.name
        dst = conv / f"{method}__{domain}__{trace.name}"
        dst.write_bytes(trace.read_bytes())
        out.append(dst)
    return out


def make_plots(report_dir, agg: list[dict]) -> None:
    """Static images: method comparison bars and convergence curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report_dir = Path(report_dir)
    plots = report_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)

    domains = sorted({a["domain"] for a in agg})
    methods = sorted({a["method"] for a in agg})
    cell = {(a["method"], a["domain"]): a["mean_dice"] for a in agg}
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(domains), 3.5))
    width = 0.8 / max(1, len(methods))
    xs = np.arange(len(domains))
    for i, m in enumerate(methods):
        vals = [cell.get((m, d), np.nan) for d in domains]
        ax.bar(xs + i * width, vals, width=width, label=m)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(domains)
    ax.set_ylabel("mean foreground Dice")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(plots / "dice_by_method.png", dpi=120)
    plt.close(fig)

    conv = report_dir / "convergence"
    if conv.exists():
        groups = defaultdict(list)
        for f in sorted(conv.glob("*.trace.csv")):
            method, domain, _ = f.name.split("__", 2)
            groups[(method, domain)].append(f)
        for (method, domain), files in groups.items():
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for f in files:
                with open(f, newline="") as fh:
                    rows = list(csv.DictReader(fh))
                its = [int(r["iteration"]) for r in rows]
                ax.plot(its, [float(r["d_dae"]) for r in rows], alpha=0.6)
                if rows and rows[0]["d_gt"]:
                    ax.plot(its, [float(r["d_gt"]) for r in rows], alpha=0.4, linestyle="--")
            ax.set_xlabel("update")
            ax.set_ylabel("Dice (solid: denoiser in/out, dashed: ground truth)")
            ax.set_title(f"{method} on {domain}")
            ax.set_ylim(0, 1)
            fig.tight_layout()
            fig.savefig(plots / f"convergence_{method}_{domain}.png", dpi=120)
            plt.close(fig)
