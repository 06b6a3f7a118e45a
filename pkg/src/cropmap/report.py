"""Report bundle: joined table, fit summary and an e_v vs biomass scatter plot (SVG)."""
from __future__ import annotations

import io
import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .biomass import LOW_BIOMASS_THRESHOLD, PolyModel, Sample, fit_poly, predict, r_squared  # noqa: E402
from .formats import atomic_write, csv_text  # noqa: E402

REPORT_HEADER = ["id", "e_v_m3_ha", "biomass_kg_ha", "predicted_kg_ha", "residual_kg_ha"]

_RC = {
    "svg.hashsalt": "cropmap",
    "svg.fonttype": "path",
    "path.simplify": False,
}


def join_samples(metrics, samples):
    """Pair metrics rows and samples by id. Samples carrying their own e_v win."""
    ev = {m["id"]: m["e_v_m3_per_ha"] for m in metrics}
    rows, missing = [], []
    for sid, s_ev, b in samples:
        v = s_ev if s_ev is not None else ev.get(sid)
        if v is None:
            missing.append(sid)
        else:
            rows.append((sid, float(v), float(b)))
    return sorted(rows), missing


def scatter_svg(rows, models: dict) -> bytes:
    """rows: (id, e_v, biomass); models: label -> PolyModel."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.4, 4.8))
        x = np.array([r[1] for r in rows], dtype=float)
        y = np.array([r[2] for r in rows], dtype=float)
        pts = ax.scatter(x, y, s=18, color="#2b6a99", label="samples")
        pts.set_gid("samples")
        if len(x):
            xs = np.linspace(x.min(), x.max(), 200)
            styles = ["-", "--", ":"]
            for k, (label, m) in enumerate(models.items()):
                line, = ax.plot(xs, predict(m, xs), styles[k % 3], color="#b23a48", label=label)
                line.set_gid(f"model-{k + 1}")
        ax.set_xlabel("Estimated canopy volume e_v (m³/ha)")
        ax.set_ylabel("Fresh biomass (kg/ha)")
        ax.legend(loc="upper left", fontsize=8)
        ax.grid(alpha=0.3)
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def _model_label(m: PolyModel, r2: float | None) -> str:
    c = m.coefficients
    if m.order == 1:
        s = f"b = {c[1]:.4g} e_v {c[0]:+.6g}"
    else:
        s = f"b = {c[2]:.4g} e_v² {c[1]:+.4g} e_v {c[0]:+.6g}"
    return s if r2 is None else f"{s} (R² = {r2:.3f})"


def build_report(rows, model: PolyModel | None, out_dir, orders=(1, 2)) -> dict:
    """Write report.csv, fit_summary.json and scatter.svg into ``out_dir``; returns the summary."""
    samples = [Sample(e, b, i) for i, e, b in rows]
    summary = {"n": len(rows), "n_low_biomass": int(sum(b < LOW_BIOMASS_THRESHOLD for _, _, b in rows)), "fits": []}
    models = {}
    if model is not None:
        r2 = r_squared(model, samples) if len(samples) >= 2 and np.ptp([s.b for s in samples]) > 0 else None
        pred = predict(model, np.array([s.e_v for s in samples], dtype=float))
        summary["model"] = {"order": model.order, "coefficients": list(model.coefficients), "r_squared": r2,
                            "n_negative_predictions": int(np.sum(pred < 0))}
        models[_model_label(model, r2)] = model
    for order in orders:
        if len(samples) >= order + 1 and len({s.e_v for s in samples}) >= order + 1:
            rep = fit_poly(samples, order)
            summary["fits"].append({"order": order, "coefficients": list(rep.model.coefficients),
                                    "r_squared": rep.r_squared, "condition": rep.condition})
            if model is None:
                models[_model_label(rep.model, rep.r_squared)] = rep.model
    table = []
    for i, e, b in rows:
        p = predict(model, e) if model is not None else None
        table.append((i, e, b, p, None if p is None else b - p))
    atomic_write(out_dir / "report.csv", csv_text(REPORT_HEADER, table))
    atomic_write(out_dir / "fit_summary.json", json.dumps(summary, indent=2) + "\n")
    atomic_write(out_dir / "scatter.svg", scatter_svg(rows, models))
    return summary
