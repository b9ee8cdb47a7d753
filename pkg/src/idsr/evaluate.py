"""Per-image evaluation of derained outputs against clean references."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imagecore import SUPPORTED_SUFFIXES, load_image
from .metrics import psnr, ssim
from .sift import SiftParams, extract, recovered_keypoints

ROW_FIELDS = ("name", "psnr_db", "ssim", "sift_clean", "sift_derained", "recovered", "gate_pass_rate")


@dataclass
class MetricsReport:
    rows: list[dict]
    baseline: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @staticmethod
    def _means(rows: list[dict]) -> dict:
        if not rows:
            return {}
        keys = [k for k in rows[0] if k != "name"]
        return {k: float(np.mean([r[k] for r in rows])) for k in keys}

    @property
    def means(self) -> dict:
        return self._means(self.rows)

    @property
    def baseline_means(self) -> dict:
        return self._means(self.baseline)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in ROW_FIELDS])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"config": self.config, "rows": self.rows, "means": self.means}
        if self.baseline:
            doc["rainy_baseline"] = {"rows": self.baseline, "means": self.baseline_means}
        return json.dumps(doc, indent=2, sort_keys=True)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "report.json").write_text(self.to_json())
        return out / "report.csv", out / "report.json"


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def _image_names(d: Path) -> list[str]:
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p.name for p in d.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)


def aligned_names(clean_dir, *others) -> list[str]:
    """File names present in every directory; any mismatch is reported by name."""
    clean = _image_names(Path(clean_dir))
    problems = []
    for d in others:
        names = _image_names(Path(d))
        missing = sorted(set(clean) - set(names))
        extra = sorted(set(names) - set(clean))
        if missing:
            problems.append(f"{d}: missing {', '.join(missing)}")
        if extra:
            problems.append(f"{d}: no clean counterpart for {', '.join(extra)}")
    if problems:
        raise ValueError("mismatched file sets; " + "; ".join(problems))
    if not clean:
        raise ValueError(f"found zero image pairs in {clean_dir}")
    return clean


def evaluate_pair(name: str, derained: np.ndarray, clean: np.ndarray, params: SiftParams,
                  derained_desc: np.ndarray | None = None, clean_features=None) -> dict:
    rec = recovered_keypoints(derained, clean, params, derained_desc, clean_features)
    return {
        "name": name,
        "psnr_db": psnr(derained, clean),
        "ssim": ssim(derained, clean),
        "sift_clean": rec.n_clean,
        "sift_derained": rec.n_derained,
        "recovered": rec.count,
        "gate_pass_rate": rec.gate_pass_rate,
    }


def run_eval(derained_dir, clean_dir, rainy_dir=None, params: SiftParams = SiftParams(),
             desc_dir=None) -> MetricsReport:
    """Metrics for every aligned file name; ``desc_dir`` enables the two-image SIFT mode.

    With ``rainy_dir`` the rainy inputs are scored the same way as a baseline.
    """
    dirs = [d for d in (derained_dir, rainy_dir, desc_dir) if d is not None]
    names = aligned_names(clean_dir, *dirs)
    rows, baseline = [], []
    for name in names:
        clean = load_image(Path(clean_dir) / name)
        clean_features = extract(clean, None, params)
        derained = load_image(Path(derained_dir) / name)
        desc = load_image(Path(desc_dir) / name) if desc_dir is not None else None
        rows.append(evaluate_pair(name, derained, clean, params, desc, clean_features))
        if rainy_dir is not None:
            rainy = load_image(Path(rainy_dir) / name)
            baseline.append(evaluate_pair(name, rainy, clean, params, None, clean_features))
    config = {
        "derained_dir": str(derained_dir), "clean_dir": str(clean_dir),
        "rainy_dir": None if rainy_dir is None else str(rainy_dir),
        "desc_dir": None if desc_dir is None else str(desc_dir),
        "sift": asdict(params),
    }
    return MetricsReport(rows, baseline, config)
