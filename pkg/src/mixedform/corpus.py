"""Bundled desk-scale datasets: real snapshots and design-faithful synthetics.

Entries live under a top-level ``corpus/`` directory, one CSV plus one JSON
manifest per entry:

* ``trees``: the classic 31-tree girth/height/volume data, real values;
* ``herbicide``: randomized complete block design, 5 blocks x 27 treatments
  (9 black-grass populations x 3 herbicides), synthetic response;
* ``chick``: growth curves for 50 chicks on 4 diets over 12 occasions with
  drop-out, synthetic response under a random intercept+slope truth;
* ``gilmour``: a 22-row x 15-column wheat trial, 107 varieties in 3 blocks,
  synthetic response with autoregressive row/column correlation;
* ``met``: a 7-site trial network, 240 genotypes in partially replicated
  layouts totaling 2127 plots, synthetic response with per-site genetic
  variances.

Synthetic entries are seeded and byte-reproducible; each manifest records
its generating truth so fits can be sanity-checked against it.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataTable, read_csv
from .errors import DataError

ENTRY_NAMES = ("trees", "herbicide", "chick", "gilmour", "met")

_TREES = [
    (8.3, 70, 10.3), (8.6, 65, 10.3), (8.8, 63, 10.2), (10.5, 72, 16.4),
    (10.7, 81, 18.8), (10.8, 83, 19.7), (11.0, 66, 15.6), (11.0, 75, 18.2),
    (11.1, 80, 22.6), (11.2, 75, 19.9), (11.3, 79, 24.2), (11.4, 76, 21.0),
    (11.4, 76, 21.4), (11.7, 69, 21.3), (12.0, 75, 19.1), (12.9, 74, 22.2),
    (12.9, 85, 33.8), (13.3, 86, 27.4), (13.7, 71, 25.7), (13.8, 64, 24.9),
    (14.0, 78, 34.5), (14.2, 80, 31.7), (14.5, 74, 36.3), (16.0, 72, 38.3),
    (16.3, 77, 42.6), (17.3, 81, 55.4), (17.5, 82, 55.7), (17.9, 80, 58.3),
    (18.0, 80, 51.5), (18.0, 80, 51.0), (20.6, 87, 77.0),
]

# site grids: (columns, rows); plot counts sum to 2127
_MET_GRIDS = [(24, 13), (20, 15), (23, 14), (19, 16), (22, 14), (21, 15), (19, 14)]
_MET_SITE_MEANS = [4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0]
_MET_GENETIC_SD = [0.5, 0.7, 0.9, 0.6, 0.8, 1.0, 0.4]
_MET_RESIDUAL_SD = 0.5
_MET_SEED = 1


def corpus_dir() -> Path:
    """Locate the corpus directory (env MIXEDFORM_CORPUS overrides)."""
    override = os.environ.get("MIXEDFORM_CORPUS")
    if override:
        return Path(override)
    here = Path(__file__).resolve()
    for parent in here.parents:
        candidate = parent / "corpus"
        if candidate.is_dir():
            return candidate
    raise DataError(
        "corpus directory not found; set MIXEDFORM_CORPUS or run "
        "`python -m mixedform.corpus <dir>` to materialize it"
    )


@dataclass(frozen=True)
class CorpusEntry:
    name: str
    table: DataTable
    manifest: dict


def load(name: str, directory: Path | None = None) -> CorpusEntry:
    """Load a corpus entry and check its dimensions against the manifest."""
    if name not in ENTRY_NAMES:
        raise DataError(f"unknown corpus entry {name!r}; have {ENTRY_NAMES}")
    directory = directory or corpus_dir()
    manifest = json.loads((directory / f"{name}.json").read_text())
    table = read_csv(directory / f"{name}.csv", schema=manifest.get("schema"))
    if table.n_rows != manifest["n_rows"]:
        raise DataError(
            f"{name}: expected {manifest['n_rows']} rows, found {table.n_rows}"
        )
    for column, count in manifest.get("factor_levels", {}).items():
        found = len(table.factor(column).levels)
        if found != count:
            raise DataError(
                f"{name}: factor {column!r} has {found} levels, expected {count}"
            )
    return CorpusEntry(name, table, manifest)


def _csv_text(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def trees_csv() -> tuple[str, dict]:
    rows = [
        [f"{g:.1f}", f"{h:d}", f"{v:.1f}"] for g, h, v in _TREES
    ]
    text = _csv_text(["Girth", "Height", "Volume"], rows)
    manifest = {
        "name": "trees",
        "n_rows": 31,
        "factor_levels": {},
        "formulas": {"fixed": "log(Volume) ~ 1 + log(Height) + log(Girth)"},
        "golden": {"canonical_fixed": "1 + log(Height) + log(Girth)"},
        "design_dims": {"n": 31, "p": 3},
        "source": "public 31-tree dataset, real values",
    }
    return text, manifest


def herbicide_csv(seed: int = 20) -> tuple[str, dict]:
    rng = np.random.default_rng(seed)
    blocks = [f"B{i + 1}" for i in range(5)]
    populations = [f"P{i + 1}" for i in range(9)]
    herbicides = ["A", "B", "C"]
    block_eff = [0.0, 0.2, -0.1, 0.15, 0.05]
    pop_eff = [0.0, 0.3, 0.5, -0.2, 0.1, 0.4, -0.3, 0.2, 0.6]
    herb_eff = [0.0, -0.5, -1.0]
    interaction = rng.normal(0.0, 0.2, size=(9, 3))
    rows = []
    for b, block in enumerate(blocks):
        combos = [(i, j) for i in range(9) for j in range(3)]
        rng.shuffle(combos)
        for i, j in combos:
            sqrt_w = (
                3.0
                + block_eff[b]
                + pop_eff[i]
                + herb_eff[j]
                + interaction[i, j]
                + rng.normal(0.0, 0.15)
            )
            rows.append(
                [block, populations[i], herbicides[j], f"{sqrt_w ** 2:.4f}"]
            )
    text = _csv_text(["Block", "Population", "Herbicide", "Weight"], rows)
    manifest = {
        "name": "herbicide",
        "n_rows": 135,
        "factor_levels": {"Block": 5, "Population": 9, "Herbicide": 3},
        "formulas": {
            "fixed": "sqrt(Weight) ~ 1 + Block + Population*Herbicide"
        },
        "golden": {
            "canonical_fixed": "1 + Block + Population + Herbicide "
            "+ Population:Herbicide"
        },
        "design_dims": {"n": 135, "p": 31, "spans": [4, 8, 2, 16]},
        "seed": seed,
        "source": "randomized complete block design, synthetic response",
    }
    return text, manifest


def chick_csv(seed: int = 7) -> tuple[str, dict]:
    rng = np.random.default_rng(seed)
    times = [0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 21]
    diets = ["D1"] * 20 + ["D2"] * 10 + ["D3"] * 10 + ["D4"] * 10
    diet_eff = {"D1": 0.0, "D2": 5.0, "D3": 10.0, "D4": 15.0}
    # drop-out: chick index -> number of leading occasions retained
    truncation = {13: 10, 15: 8, 16: 7, 18: 2, 44: 11}
    sigma0, sigma1, corr, sigma_e = 8.0, 1.5, 0.5, 3.0
    cov = np.array(
        [
            [sigma0 ** 2, corr * sigma0 * sigma1],
            [corr * sigma0 * sigma1, sigma1 ** 2],
        ]
    )
    chol = np.linalg.cholesky(cov)
    rows = []
    for c in range(50):
        chick = f"c{c + 1:02d}"
        b = chol @ rng.standard_normal(2)
        keep = truncation.get(c + 1, len(times))
        for t in times[:keep]:
            weight = (
                40.0
                + diet_eff[diets[c]]
                + b[0]
                + (8.0 + b[1]) * t
                + rng.normal(0.0, sigma_e)
            )
            rows.append([f"{weight:.3f}", str(t), chick, diets[c]])
    text = _csv_text(["weight", "Time", "Chick", "Diet"], rows)
    manifest = {
        "name": "chick",
        "n_rows": len(rows),
        "factor_levels": {"Chick": 50, "Diet": 4},
        "formulas": {
            "fixed_grouped": "weight ~ 1 + Time + Diet + (1 + Time | Chick)",
            "fixed": "weight ~ 1 + Time + Diet",
            "random_structural": "~str(~Chick + Chick:Time, ~us(2):id(50))",
            "random_structural_diag": "~str(~Chick + Chick:Time, ~diag(2):id(50))",
        },
        "golden": {"canonical_fixed": "1 + Time + Diet"},
        "truth": {
            "intercept_sd": sigma0,
            "slope_sd": sigma1,
            "intercept_slope_corr": corr,
            "residual_sd": sigma_e,
        },
        "seed": seed,
        "source": "50 chicks on 4 diets with drop-out, synthetic response",
    }
    return text, manifest


def gilmour_csv(seed: int = 11) -> tuple[str, dict]:
    rng = np.random.default_rng(seed)
    n_rows, n_cols = 22, 15
    varieties = [f"V{i + 1:03d}" for i in range(107)]
    rep_eff = [5.0, 5.3, 4.7]
    rho_col, rho_row, sigma_spatial = 0.4, 0.6, 0.5
    sigma_g = 0.8
    gen_eff = rng.normal(0.0, sigma_g, size=107)

    # each block spans 5 contiguous columns; 3 varieties have two plots per
    # block, the rest one, filling 110 plots per block
    assignment = {}
    for b in range(3):
        slots = varieties[:3] * 2 + varieties[3:]
        rng.shuffle(slots)
        plots = [
            (c, r) for c in range(b * 5, b * 5 + 5) for r in range(n_rows)
        ]
        for plot, variety in zip(plots, slots):
            assignment[plot] = (variety, b)

    def ar1(dim: int, rho: float) -> np.ndarray:
        idx = np.arange(dim)
        return rho ** np.abs(idx[:, None] - idx[None, :])

    spatial_cov = sigma_spatial ** 2 * np.kron(ar1(n_cols, rho_col), ar1(n_rows, rho_row))
    spatial = np.linalg.cholesky(spatial_cov) @ rng.standard_normal(n_cols * n_rows)

    rows = []
    for c in range(n_cols):
        for r in range(n_rows):
            variety, b = assignment[(c, r)]
            v = varieties.index(variety)
            y = rep_eff[b] + gen_eff[v] + spatial[c * n_rows + r]
            rows.append(
                [
                    f"{y:.4f}",
                    variety,
                    f"R{b + 1}",
                    str(c + 1),
                    str(r + 1),
                    f"C{c + 1:02d}",
                    f"R{r + 1:02d}",
                ]
            )
    text = _csv_text(["yield", "gen", "rep", "col", "row", "colf", "rowf"], rows)
    manifest = {
        "name": "gilmour",
        "n_rows": 330,
        "factor_levels": {"gen": 107, "rep": 3, "colf": 15, "rowf": 22},
        "formulas": {
            "fixed": "yield ~ 0 + rep",
            "random_structural": "~idv(gen)",
            "fixed_grouped": "yield ~ 0 + rep + (1 | gen)",
            "rcov": "~ar1(colf):ar1(rowf)",
        },
        "golden": {"canonical_fixed": "rep + 0"},
        "design_dims": {"n": 330, "rows": 22, "cols": 15, "blocks": 3, "varieties": 107},
        "truth": {
            "rep_effects": rep_eff,
            "genetic_sd": sigma_g,
            "rho_col": rho_col,
            "rho_row": rho_row,
            "spatial_sd": sigma_spatial,
        },
        "seed": seed,
        "source": "22x15 field layout, 107 varieties, synthetic response",
    }
    return text, manifest


def generate_synthetic_met(seed: int = _MET_SEED) -> str:
    """Deterministic 7-site trial network CSV; same seed, same bytes."""
    rng = np.random.default_rng(seed)
    n_geno = 240
    genotypes = [f"G{i + 1:03d}" for i in range(n_geno)]
    rows = []
    for s, (n_cols, n_rows) in enumerate(_MET_GRIDS):
        site = f"S{s + 1}"
        n_plots = n_cols * n_rows
        extras = rng.choice(n_geno, size=n_plots - n_geno, replace=False)
        plot_geno = np.concatenate([np.arange(n_geno), extras])
        rng.shuffle(plot_geno)
        genetic = rng.normal(0.0, _MET_GENETIC_SD[s], size=n_geno)
        k = 0
        for c in range(n_cols):
            for r in range(n_rows):
                g = int(plot_geno[k])
                y = (
                    _MET_SITE_MEANS[s]
                    + genetic[g]
                    + rng.normal(0.0, _MET_RESIDUAL_SD)
                )
                rows.append(
                    [
                        f"{y:.4f}",
                        site,
                        genotypes[g],
                        str(c + 1),
                        str(r + 1),
                        f"C{c + 1:02d}",
                        f"R{r + 1:02d}",
                    ]
                )
                k += 1
    return _csv_text(["yield", "site", "geno", "col", "row", "colf", "rowf"], rows)


def met_manifest() -> dict:
    n = sum(c * r for c, r in _MET_GRIDS)
    return {
        "name": "met",
        "n_rows": n,
        "factor_levels": {"site": 7, "geno": 240, "colf": 24, "rowf": 16},
        "formulas": {
            "fixed": "yield ~ 0 + site",
            "random_structural": "~diag(site):id(geno)",
            "random_structural_us": "~us(site):id(geno)",
            "fixed_grouped": "yield ~ 0 + site + (1 | site:geno)",
            "rcov_at": "~at(site):ar1(colf):ar1(rowf)",
        },
        "golden": {"canonical_fixed": "site + 0"},
        "design_dims": {"n": n, "sites": 7, "genotypes": 240},
        "truth": {
            "site_means": _MET_SITE_MEANS,
            "genetic_sd": _MET_GENETIC_SD,
            "residual_sd": _MET_RESIDUAL_SD,
            "grids": [list(g) for g in _MET_GRIDS],
        },
        "seed": _MET_SEED,
        "source": "7-site p-rep network, 2127 plots, synthetic response",
    }


def write_corpus(directory: Path) -> None:
    """Materialize every corpus entry (CSV + manifest) into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    builders = {
        "trees": trees_csv,
        "herbicide": herbicide_csv,
        "chick": chick_csv,
        "gilmour": gilmour_csv,
    }
    for name, builder in builders.items():
        text, manifest = builder()
        (directory / f"{name}.csv").write_text(text)
        (directory / f"{name}.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (directory / "met.csv").write_text(generate_synthetic_met())
    (directory / "met.json").write_text(json.dumps(met_manifest(), indent=2) + "\n")


if __name__ == "__main__":  # pragma: no cover
    import sys

    target = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("corpus")
    write_corpus(target)
    print(f"corpus written to {target.resolve()}")
