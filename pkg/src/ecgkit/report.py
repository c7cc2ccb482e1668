"""Evaluation artifacts as plain files.

One directory per evaluation: metrics.json for the numbers, CSVs for the
confusion matrices, ROC curves, confidence intervals, saliency maps and
the training history. Writers are deterministic so re-rendering the same
inputs reproduces every file byte for byte.
"""

import json

from .beats import CLASS_NAMES
from .errors import IoError


def _write_text(path, text):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as handle:
            handle.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None
    return path


def _matrix_csv(rows, class_names, cell):
    lines = ["," + ",".join(class_names)]
    for name, row in zip(class_names, rows):
        lines.append(name + "," + ",".join(cell(v) for v in row))
    return "\n".join(lines) + "\n"


def render_report(out_dir, metrics=None, matrix=None, curves=None, cis=None,
                  saliency=None, history=None, ensemble=None,
                  class_names=CLASS_NAMES):
    """Write whichever artifacts were computed; returns the file list.

    curves maps class index to a RocCurve, saliency maps a sample id to a
    SaliencyMap, ensemble is an EnsembleSpec whose weights belong in the
    metrics file for traceability.
    """
    from pathlib import Path
    out_dir = Path(out_dir)
    written = []

    if metrics is not None:
        payload = metrics.to_dict(class_names)
        if ensemble is not None:
            payload["ensemble"] = ensemble.to_dict()
        written.append(_write_text(
            out_dir / "metrics.json",
            json.dumps(payload, indent=2, sort_keys=True) + "\n"))

    if matrix is not None:
        written.append(_write_text(
            out_dir / "confusion.csv",
            _matrix_csv(matrix.counts, class_names, lambda v: str(int(v)))))
        written.append(_write_text(
            out_dir / "confusion_normalized.csv",
            _matrix_csv(matrix.normalized(), class_names,
                        lambda v: repr(float(v)))))

    for label in sorted(curves or {}):
        curve = curves[label]
        lines = ["fpr,tpr"]
        lines += [f"{repr(float(x))},{repr(float(y))}"
                  for x, y in zip(curve.fpr, curve.tpr)]
        written.append(_write_text(out_dir / f"roc_class_{label}.csv",
                                   "\n".join(lines) + "\n"))

    if cis:
        lines = ["metric,mean,lower,upper,level,n_resamples"]
        for ci in cis:
            lines.append(f"{ci.name},{repr(ci.mean)},{repr(ci.lower)},"
                         f"{repr(ci.upper)},{repr(ci.level)},"
                         f"{ci.n_resamples}")
        written.append(_write_text(out_dir / "ci.csv",
                                   "\n".join(lines) + "\n"))

    for sample_id in sorted(saliency or {}):
        saliency_map = saliency[sample_id]
        lines = ["position,value"]
        lines += [f"{i},{repr(float(v))}"
                  for i, v in enumerate(saliency_map.values)]
        written.append(_write_text(out_dir / f"gradcam_{sample_id}.csv",
                                   "\n".join(lines) + "\n"))

    if history is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            written.append(history.to_csv(out_dir / "history.csv"))
        except OSError as exc:
            raise IoError(f"cannot write {out_dir / 'history.csv'}: "
                          f"{exc}") from None

    return sorted(Path(p) for p in written)
