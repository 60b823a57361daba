"""
Command-line entry point for sparse multivariate meta-analysis.

Commands:
    simulate    generate replicate datasets with a known truth
    fit         low-dimensional multivariate fit of one dataset
    univariate  per-variate REML meta-analysis of one dataset
    batch       fit and univariate analysis of every replicate
    evaluate    compare both arms over fitted replicates
    sensitivity rerun simulate, batch and evaluate over a density x het_sd grid
    advise      model recommendation and parameter counts for a dataset

Outputs are written under --out (default: $SPARSEMETA_OUTPUT_DIR/<command>).
"""

import argparse
import copy
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from io_utils.config import (
    FIT_SCHEMA,
    SAMPLER_SCHEMA,
    SENSITIVITY_SCHEMA,
    SIMULATION_SCHEMA,
    env_settings,
    load_config,
    parse_float_list,
    parse_values,
    sampler_config,
    simulation_config,
)
from io_utils.storage import (
    RunManifest,
    read_dataset_csv,
    read_json,
    write_csv,
    write_dataset_csv,
    write_json,
)
from pipeline.MetaData import (
    MetaDataset,
    is_sparse,
    param_count,
    param_count_curve,
    recommend_model,
    select_q,
)
from pipeline.Metrics import (
    PREDICTORS,
    ComparisonRow,
    coverage,
    exclusion_accounting,
    mean_ratio,
    metric_frame,
    regress_metric,
    relative_length_curve,
)
from pipeline.NUTSSampler import FitResult, SamplerConfig, derive_seeds, fit
from pipeline.Simulator import DEFAULT_HET_SD, SimConfig, calibrate_het_sd, resolve_het_sd, simulate_meta, variate_ids
from pipeline.Projection import save_projection
from pipeline.Univariate import FLAG_ZERO_WIDTH, analyze_univariate
from pipeline.errors import InfeasibleError, SamplerAbort, SparseMetaError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NONCONVERGED = 2

BATCH_STREAM = 3

DATASET_FILE = "dataset.csv"
TRUTH_FILE = "truth.json"
POSTERIOR_FILE = "posterior.csv"
COVARIANCE_FILE = "covariance.csv"
DIAGNOSTICS_FILE = "diagnostics.json"
UNIVARIATE_FILE = "univariate.csv"
PROJECTION_FILE = "projection.csv"

SENSITIVITY_COLUMNS = [
    "density", "het_sd", "replicates_analysed", "converged_share",
    "coverage_m", "coverage_m_low", "coverage_m_high",
    "coverage_u", "coverage_u_low", "coverage_u_high",
    "mean_ratio_length", "mean_ratio_length_low", "mean_ratio_length_high",
    "mean_ratio_bias", "mean_ratio_bias_low", "mean_ratio_bias_high",
    "error",
]


def _replicate_name(index: int) -> str:
    return f"rep_{index:04d}"


def _covariance_frame(result: FitResult, variates: Sequence[str]) -> pd.DataFrame:
    frame = pd.DataFrame(result.covariance(), columns=list(variates))
    frame.insert(0, "variate_id", list(variates))
    return frame


def write_fit_outputs(result: FitResult, dataset: MetaDataset, out_dir: Path) -> List[Path]:
    """Posterior table, lifted covariance, diagnostics and projection of one fit."""
    return [
        write_csv(result.summary.table, out_dir / POSTERIOR_FILE),
        write_csv(_covariance_frame(result, dataset.variates), out_dir / COVARIANCE_FILE),
        write_json(result.diagnostics, out_dir / DIAGNOSTICS_FILE),
        save_projection(result.projection, out_dir / PROJECTION_FILE),
    ]


def _analyze_replicate(rep_dir: Path, sampler: SamplerConfig, q: Optional[int], q_max: int,
                       level: float, univariate_level: float) -> Dict[str, object]:
    """Fit and univariate arms for one replicate directory; never raises."""
    outcome = {"replicate": rep_dir.name, "converged": None, "error": None}
    try:
        dataset = read_dataset_csv(rep_dir / DATASET_FILE)
        write_csv(analyze_univariate(dataset, level=univariate_level), rep_dir / UNIVARIATE_FILE)
        result = fit(dataset, q=q, config=sampler, level=level, q_max=q_max)
        write_fit_outputs(result, dataset, rep_dir)
        outcome["converged"] = result.converged
    except Exception as e:
        if isinstance(e, SamplerAbort):
            write_json(e.state_dump(), rep_dir / "sampler_abort.json")
        outcome["error"] = str(e)
    return outcome


class MetaAnalysisPipeline:
    """
    Orchestrates simulation, fitting, univariate analysis and evaluation,
    writing every result with a run manifest.
    """

    # ---------- CONFIG ----------
    SEED = 20201                        # master seed
    OUTPUT_DIR = "./output"             # output root
    WORKERS = 1                         # replicate fan-out for batch
    LEVEL = 0.95                        # credible level of `fit`
    BATCH_LEVEL = 0.98                  # credible level paired with 95% CIs in batch runs
    UNIVARIATE_LEVEL = 0.95             # confidence level of the univariate arm
    Q_MAX = 10                          # largest q chosen automatically
    N_BOOT = 2000                       # cluster-bootstrap resamples
    CURVE_POINTS = 25                   # grid points of the relative-length curves
    CURVE_P_VALUES = range(2, 31)       # p values of the parameter-count curve
    # density x het_sd grid of `sensitivity`
    SENSITIVITY_DENSITIES = (0.12, 0.24, 0.48)
    SENSITIVITY_HET_SDS = (DEFAULT_HET_SD / 2, DEFAULT_HET_SD, 2 * DEFAULT_HET_SD)
    # ----------------------------

    def __init__(
        self,
        output_dir: str = None,
        seed: int = None,
        workers: int = None,
        sampler: SamplerConfig = None,
        q: int = None,
        q_max: int = None,
        level: float = None,
        univariate_level: float = None,
        projection_seed: int = None,
        n_boot: int = None,
    ):
        """
        Initialize the pipeline with optional custom configuration.

        Args:
            output_dir: Directory outputs are written to
            seed: Master seed
            workers: Processes used by batch
            sampler: Sampler settings (its seed is replaced by `seed`)
            q: Fixed covariance dimension; chosen automatically when None
            q_max: Upper bound for the automatic q
            level: Credible level of the multivariate intervals
            univariate_level: Confidence level of the univariate intervals
            projection_seed: Seed of the projection; derived when None
            n_boot: Cluster-bootstrap resamples in evaluate
        """
        self.output_dir = Path(output_dir or self.OUTPUT_DIR)
        self.seed = seed if seed is not None else self.SEED
        self.workers = workers or self.WORKERS
        self.sampler = replace(sampler or SamplerConfig(), seed=self.seed)
        self.q = q
        self.q_max = q_max or self.Q_MAX
        self.level = level
        self.univariate_level = univariate_level or self.UNIVARIATE_LEVEL
        self.projection_seed = projection_seed
        self.n_boot = n_boot or self.N_BOOT

    def _config_echo(self, **extra) -> dict:
        return {
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "workers": self.workers,
            "sampler": asdict(self.sampler),
            "q": self.q,
            "q_max": self.q_max,
            "level": self.level,
            "univariate_level": self.univariate_level,
            "projection_seed": self.projection_seed,
            "n_boot": self.n_boot,
            **extra,
        }

    def simulate(self, config: SimConfig, calibrate: bool = False) -> int:
        """
        Write config.n_meta replicate directories, each with a dataset CSV and a truth JSON.

        Returns:
            Exit code
        """
        print("Step 1: Simulating replicates...")
        print("-" * 70)

        config = replace(config, seed=self.seed).validate()
        if calibrate:
            het_sd = calibrate_het_sd(config.target_i2, config)
            print(f"✅ Calibrated het_sd = {het_sd:.5f} for median I^2 = {config.target_i2}")
        else:
            het_sd = resolve_het_sd(config)
        config = replace(config, het_sd=het_sd)

        manifest = RunManifest(command="simulate", config=self._config_echo(simulation=asdict(config)),
                               seeds={"master": self.seed})
        written = []
        for index in range(config.n_meta):
            dataset, truth = simulate_meta(config, index)
            rep_dir = self.output_dir / _replicate_name(index)
            written.append(write_dataset_csv(dataset, rep_dir / DATASET_FILE))
            written.append(write_json(truth.to_dict(), rep_dir / TRUTH_FILE))
            logger.info("Replicate %d: m=%d p=%d n=%d", index, dataset.m, dataset.p, dataset.n)

        manifest.add_outputs(written, root=self.output_dir)
        manifest.write(self.output_dir)
        print(f"✅ Wrote {config.n_meta} replicates to {self.output_dir}\n")
        return EXIT_OK

    def fit_dataset(self, dataset_path: Path) -> int:
        """
        Fit the low-dimensional model and write posterior, covariance and diagnostics.

        Returns:
            EXIT_OK when converged, EXIT_NONCONVERGED otherwise
        """
        print("Step 1: Fitting low-dimensional model...")
        print("-" * 70)

        dataset = read_dataset_csv(dataset_path)
        level = self.level or self.LEVEL
        manifest = RunManifest(command="fit", config=self._config_echo(level=level))
        manifest.add_input(dataset_path)
        try:
            result = fit(dataset, q=self.q, config=self.sampler, level=level,
                         q_max=self.q_max, projection_seed=self.projection_seed)
        except SamplerAbort as e:
            write_json(e.state_dump(), self.output_dir / "sampler_abort.json")
            raise

        written = write_fit_outputs(result, dataset, self.output_dir)
        manifest.seeds = {
            "master": self.seed,
            "projection": result.diagnostics["projection_seed"],
            "chains": result.diagnostics["chain_seeds"],
        }
        manifest.add_outputs(written, root=self.output_dir)
        status = "completed" if result.converged else "nonconverged"
        manifest.write(self.output_dir, status=status)

        print(f"✅ q={result.q}, p={dataset.p}, n={dataset.n}; outputs in {self.output_dir}")
        if not result.converged:
            print(f"⚠️  Not converged: max R-hat on mu = {np.max(result.summary.rhat[:dataset.p]):.4f}")
            return EXIT_NONCONVERGED
        return EXIT_OK

    def univariate(self, dataset_path: Path) -> int:
        print("Step 1: Univariate REML meta-analyses...")
        print("-" * 70)

        dataset = read_dataset_csv(dataset_path)
        manifest = RunManifest(command="univariate", config=self._config_echo())
        manifest.add_input(dataset_path)
        results = analyze_univariate(dataset, level=self.univariate_level)
        written = [write_csv(results, self.output_dir / UNIVARIATE_FILE)]
        manifest.add_outputs(written, root=self.output_dir)
        manifest.write(self.output_dir)

        flagged = results[results["flag"] != ""]
        print(f"✅ {len(results)} variates analysed, {len(flagged)} flagged")
        for row in flagged.itertuples(index=False):
            print(f"⚠️  {row.variate_id}: {row.flag}")
        return EXIT_OK

    def _replicate_dirs(self, replicates_dir: Path) -> List[Path]:
        dirs = sorted(p for p in Path(replicates_dir).iterdir() if (p / DATASET_FILE).is_file())
        if not dirs:
            raise InfeasibleError(f"no replicate directories with {DATASET_FILE} in {replicates_dir}")
        return dirs

    def batch(self, replicates_dir: Path) -> int:
        """
        Run both arms on every replicate, writing outputs into each replicate directory.

        Returns:
            EXIT_OK if every replicate converged, EXIT_NONCONVERGED if some did not
            or failed, EXIT_ERROR if none succeeded
        """
        print("Step 1: Fitting every replicate...")
        print("-" * 70)

        dirs = self._replicate_dirs(replicates_dir)
        level = self.level or self.BATCH_LEVEL
        seeds = derive_seeds(self.seed, len(dirs), BATCH_STREAM)
        jobs = [
            (rep_dir, replace(self.sampler, seed=seed), self.q, self.q_max, level, self.univariate_level)
            for rep_dir, seed in zip(dirs, seeds)
        ]

        if self.workers > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                outcomes = list(pool.map(_analyze_replicate, *zip(*jobs)))
        else:
            outcomes = [_analyze_replicate(*job) for job in jobs]

        failed = [o for o in outcomes if o["error"]]
        nonconverged = [o for o in outcomes if o["converged"] is False]
        for o in failed:
            print(f"❌ {o['replicate']}: {o['error']}")
        for o in nonconverged:
            print(f"⚠️  {o['replicate']}: not converged")

        manifest = RunManifest(command="batch", config=self._config_echo(level=level),
                               seeds={"master": self.seed, "replicates": dict(zip((d.name for d in dirs), seeds))})
        write_json({"outcomes": outcomes}, Path(replicates_dir) / "batch.json")
        manifest.add_outputs([Path(replicates_dir) / "batch.json"], root=replicates_dir)
        manifest.write(self.output_dir)

        print(f"✅ {len(outcomes) - len(failed)} of {len(outcomes)} replicates fitted\n")
        if len(failed) == len(outcomes):
            return EXIT_ERROR
        return EXIT_NONCONVERGED if failed or nonconverged else EXIT_OK

    def _collect_rows(self, dirs: List[Path]):
        rows: List[ComparisonRow] = []
        missing, nonconverged, unusable = [], [], []
        pairs_total = pairs_zero_width = 0
        for rep_dir in dirs:
            name = rep_dir.name
            paths = [rep_dir / f for f in (TRUTH_FILE, POSTERIOR_FILE, DIAGNOSTICS_FILE, UNIVARIATE_FILE)]
            if not all(p.is_file() for p in paths):
                missing.append(name)
                continue
            truth = read_json(paths[0])
            posterior = pd.read_csv(paths[1]).set_index("variate_id")
            diagnostics = read_json(paths[2])
            univariate = pd.read_csv(paths[3], keep_default_na=False).set_index("variate_id")

            if not diagnostics.get("converged", False):
                nonconverged.append(name)
                continue
            usable = univariate[univariate["flag"] != FLAG_ZERO_WIDTH]
            if usable.empty:
                unusable.append(name)
                continue

            pairs_total += len(posterior)
            mu_true = dict(zip(variate_ids(int(truth["p"])), truth["mu_true"]))
            for variate_id in posterior.index:
                if variate_id not in usable.index:
                    if variate_id in univariate.index and univariate.loc[variate_id, "flag"] == FLAG_ZERO_WIDTH:
                        pairs_zero_width += 1
                    continue
                m_row, u_row = posterior.loc[variate_id], usable.loc[variate_id]
                rows.append(ComparisonRow(
                    meta_id=name,
                    variate_id=variate_id,
                    mu_true=float(mu_true[variate_id]),
                    est_m=float(m_row["mean"]),
                    est_u=float(u_row["estimate"]),
                    ci_m=(float(m_row["lower"]), float(m_row["upper"])),
                    ci_u=(float(u_row["ci_low"]), float(u_row["ci_high"])),
                    n_estimates=int(truth["n_estimates"]),
                    n_variates=int(truth["p"]),
                ))
        return rows, missing, nonconverged, unusable, pairs_total, pairs_zero_width

    @staticmethod
    def _forest_frame(frame: pd.DataFrame) -> pd.DataFrame:
        parts = []
        for side, est, low, high in (("m", "est_m", "ci_m_low", "ci_m_high"),
                                     ("u", "est_u", "ci_u_low", "ci_u_high")):
            part = frame[["meta_id", "variate_id", "mu_true", est, low, high]].copy()
            part.columns = ["meta_id", "variate_id", "mu_true", "estimate", "low", "high"]
            part.insert(2, "side", side)
            parts.append(part)
        return pd.concat(parts, ignore_index=True).sort_values(["meta_id", "variate_id", "side"])

    def evaluate(self, replicates_dir: Path) -> int:
        """
        Compare both arms across fitted replicates: coverage, bias and length ratios,
        regressions and exclusion accounting.
        """
        print("Step 1: Evaluating replicates...")
        print("-" * 70)

        dirs = self._replicate_dirs(replicates_dir)
        rows, missing, nonconverged, unusable, pairs_total, pairs_zero_width = self._collect_rows(dirs)
        if not rows:
            raise InfeasibleError(f"no usable CI-CrI pairs in {replicates_dir}")

        frame = metric_frame(rows)
        ledger = exclusion_accounting([d.name for d in dirs], missing, nonconverged, unusable,
                                      pairs_total, pairs_zero_width, frame)
        written = [write_csv(frame, self.output_dir / "metrics.csv"),
                   write_csv(self._forest_frame(frame), self.output_dir / "forest.csv")]

        summary = {
            "coverage_m": coverage(rows, "m").to_dict(),
            "coverage_u": coverage(rows, "u").to_dict(),
            "exclusions": ledger.to_dict(),
            "usability": ledger.usability(),
            "regressions": {},
        }
        for name, column in (("bias", "log_rel_bias"), ("length", "log_rel_length")):
            kept = frame.dropna(subset=[column])
            summary[f"mean_ratio_{name}"] = (
                mean_ratio(kept[column], kept["meta_id"], n_boot=self.n_boot, seed=self.seed)
                if len(kept) else None)
            try:
                result = regress_metric(frame, name, n_boot=self.n_boot, seed=self.seed)
            except SparseMetaError as e:
                print(f"⚠️  Skipping {name} regression: {e}")
                summary["regressions"][name] = {"skipped": str(e)}
                continue
            summary["regressions"][name] = result.to_dict()
            if name == "length":
                for predictor in PREDICTORS:
                    grid = np.linspace(frame[predictor].min(), frame[predictor].max(), self.CURVE_POINTS)
                    curve = relative_length_curve(result, predictor, grid)
                    written.append(write_csv(curve, self.output_dir / f"relative_length_{predictor}.csv"))

        written.append(write_json(summary, self.output_dir / "summary.json"))
        manifest = RunManifest(command="evaluate", config=self._config_echo(),
                               seeds={"master": self.seed})
        manifest.add_outputs(written, root=self.output_dir)
        manifest.write(self.output_dir)

        cov_m, cov_u = summary["coverage_m"], summary["coverage_u"]
        print(f"✅ {len(rows)} pairs from {ledger.replicates_analysed} replicates")
        print(f"   Coverage (multivariate): {cov_m['proportion']:.3f} [{cov_m['ci_low']:.3f}, {cov_m['ci_high']:.3f}]")
        print(f"   Coverage (univariate):   {cov_u['proportion']:.3f} [{cov_u['ci_low']:.3f}, {cov_u['ci_high']:.3f}]")
        if missing:
            print(f"⚠️  Missing fits: {', '.join(missing)}")
        return EXIT_OK

    def _cell_pipeline(self, output_dir: Path) -> "MetaAnalysisPipeline":
        cell = copy.copy(self)
        cell.output_dir = output_dir
        return cell

    @staticmethod
    def _sensitivity_record(density: float, het_sd: float, summary: dict) -> Dict[str, object]:
        record = {"density": density, "het_sd": het_sd,
                  "replicates_analysed": summary["exclusions"]["replicates_analysed"],
                  "converged_share": summary["usability"].get("multivariate", {}).get("proportion"),
                  "error": ""}
        for key in ("coverage_m", "coverage_u", "mean_ratio_length", "mean_ratio_bias"):
            value = summary.get(key) or {}
            estimate = value.get("proportion", value.get("estimate"))
            record.update({key: estimate, f"{key}_low": value.get("ci_low"), f"{key}_high": value.get("ci_high")})
        return record

    def sensitivity(self, config: SimConfig, densities: Optional[Sequence[float]] = None,
                    het_sds: Optional[Sequence[float]] = None) -> int:
        """
        Repeat simulate, batch and evaluate on every density x het_sd cell and tabulate
        coverage and mean ratios in sensitivity.csv.

        Each cell lives in `density_<d>_het_<h>/` with `replicates/`, `batch/` and `eval/`.
        All cells share the master seed, so they differ only in the varied settings.

        Returns:
            EXIT_OK when every cell was evaluated, EXIT_NONCONVERGED when some cells
            failed, EXIT_ERROR when none could be evaluated
        """
        print("Step 1: Sensitivity sweep...")
        print("-" * 70)

        densities = list(densities or self.SENSITIVITY_DENSITIES)
        het_sds = list(het_sds or self.SENSITIVITY_HET_SDS)
        cells = [(d, h, replace(config, density=d, het_sd=h).validate()) for d in densities for h in het_sds]

        records = []
        for density, het_sd, cell_config in cells:
            cell_dir = self.output_dir / f"density_{density:g}_het_{het_sd:g}"
            replicates = cell_dir / "replicates"
            print(f"\n▶ density={density:g}, het_sd={het_sd:g}")
            try:
                self._cell_pipeline(replicates).simulate(cell_config)
                if self._cell_pipeline(cell_dir / "batch").batch(replicates) == EXIT_ERROR:
                    raise InfeasibleError("no replicate could be fitted")
                self._cell_pipeline(cell_dir / "eval").evaluate(replicates)
            except (SparseMetaError, OSError) as e:
                logger.warning("Sensitivity cell density=%g het_sd=%g failed: %s", density, het_sd, e)
                records.append({"density": density, "het_sd": het_sd, "error": str(e)})
                continue
            summary = read_json(cell_dir / "eval" / "summary.json")
            records.append(self._sensitivity_record(density, het_sd, summary))

        table = pd.DataFrame.from_records(records, columns=SENSITIVITY_COLUMNS)
        written = [write_csv(table, self.output_dir / "sensitivity.csv")]
        manifest = RunManifest(command="sensitivity",
                               config=self._config_echo(simulation=asdict(config), densities=densities,
                                                        het_sds=het_sds),
                               seeds={"master": self.seed})
        manifest.add_outputs(written, root=self.output_dir)
        failed = int((table["error"].fillna("") != "").sum())
        manifest.write(self.output_dir, status="completed" if not failed else "partial")

        print(f"\n✅ {len(cells) - failed} of {len(cells)} cells evaluated")
        for row in table.itertuples(index=False):
            if row.error:
                print(f"❌ density={row.density:g}, het_sd={row.het_sd:g}: {row.error}")
            else:
                print(f"   density={row.density:g}, het_sd={row.het_sd:g}: coverage m={row.coverage_m:.3f} "
                      f"u={row.coverage_u:.3f}")
        if failed == len(cells):
            return EXIT_ERROR
        return EXIT_NONCONVERGED if failed else EXIT_OK

    def advise(self, dataset_path: Path) -> int:
        dataset = read_dataset_csv(dataset_path)
        n, p, m = dataset.n, dataset.p, dataset.m
        print(f"Studies m={m}, variates p={p}, estimates n={n}, density={dataset.density:.3f}")
        print(f"Sparse (n < p^2 + p = {p * p + p}): {'yes' if is_sparse(n, p) else 'no'}")
        print(f"Recommended model: {recommend_model(n, p)}")
        try:
            q = select_q(n, p, self.q_max)
            print(f"Selected q={q} ({param_count('lowdim', p, q)} parameters)")
        except InfeasibleError as e:
            print(f"⚠️  {e}")
        print(f"Parameters: riley={param_count('riley', p)}, lin_chu={param_count('lin_chu', p)}")
        write_csv(param_count_curve(self.CURVE_P_VALUES), self.output_dir / "param_count_curve.csv")
        return EXIT_OK

    def run(self, command: str, target: Optional[Path] = None, sim_config: Optional[SimConfig] = None,
            calibrate: bool = False, densities: Optional[Sequence[float]] = None,
            het_sds: Optional[Sequence[float]] = None) -> int:
        """
        Run one command, turning pipeline errors into exit code 1.

        Returns:
            Exit code (0 success, 2 completed but not converged, 1 error)
        """
        print("\n" + "=" * 70)
        print(f"📊 Sparse multivariate meta-analysis: {command}")
        print("=" * 70 + "\n")

        self.output_dir.mkdir(parents=True, exist_ok=True)
        try:
            if command == "simulate":
                code = self.simulate(sim_config or SimConfig(), calibrate=calibrate)
            elif command == "fit":
                code = self.fit_dataset(target)
            elif command == "univariate":
                code = self.univariate(target)
            elif command == "batch":
                code = self.batch(target)
            elif command == "evaluate":
                code = self.evaluate(target)
            elif command == "sensitivity":
                code = self.sensitivity(sim_config or SimConfig(), densities=densities, het_sds=het_sds)
            elif command == "advise":
                code = self.advise(target)
            else:
                raise ValueError(f"Unknown command: {command}")
        except (SparseMetaError, OSError) as e:
            print(f"❌ Error during {command}: {e}")
            return EXIT_ERROR

        print("\n" + "=" * 70)
        print("✨ Process Complete!")
        print("=" * 70 + "\n")
        return code


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--config", type=Path, help="KEY=value config file")
    parser.add_argument("--log-level", help="logging level (default $SPARSEMETA_LOG_LEVEL)")
    parser.add_argument("--workers", type=int, help="replicate fan-out")


def _add_sampler(parser: argparse.ArgumentParser):
    parser.add_argument("--q", type=int, help="covariance dimension (default: largest feasible)")
    parser.add_argument("--q-max", type=int)
    parser.add_argument("--level", type=float, help="credible level")
    parser.add_argument("--univariate-level", type=float)
    parser.add_argument("--chains", type=int)
    parser.add_argument("--warmup", type=int)
    parser.add_argument("--samples", type=int)
    parser.add_argument("--target-accept", type=float)
    parser.add_argument("--max-tree-depth", type=int)
    parser.add_argument("--projection-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsemeta", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate replicate datasets")
    _add_common(p)
    p.add_argument("--n-meta", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--het-sd", help="heterogeneity sd or 'calibrated'")
    p.add_argument("--target-i2", type=float)
    p.add_argument("--calibrate", action="store_true", help="calibrate het_sd to --target-i2 first")

    for name, help_text in (("fit", "fit one dataset"), ("univariate", "univariate analysis of one dataset"),
                            ("advise", "recommend a model for one dataset")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("dataset", type=Path)
        _add_common(p)
        _add_sampler(p)

    for name, help_text in (("batch", "fit every replicate"), ("evaluate", "compare arms over replicates")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("replicates", type=Path)
        _add_common(p)
        _add_sampler(p)
        p.add_argument("--n-boot", type=int)

    p = sub.add_parser("sensitivity", help="rerun the simulation study over a density x het_sd grid")
    _add_common(p)
    _add_sampler(p)
    p.add_argument("--n-meta", type=int, help="replicates per grid cell")
    p.add_argument("--densities", type=parse_float_list, help="comma-separated densities")
    p.add_argument("--het-sds", type=parse_float_list, help="comma-separated heterogeneity sds")
    p.add_argument("--n-boot", type=int)
    return parser


def _merge(file_values: dict, flags: argparse.Namespace, names: Sequence[str]) -> dict:
    merged = dict(file_values)
    for name in names:
        value = getattr(flags, name, None)
        if value is not None:
            merged[name] = value
    return merged


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    env = env_settings()
    logging.basicConfig(level=(args.log_level or env["log_level"]).upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        schema = {"simulate": SIMULATION_SCHEMA, "sensitivity": SENSITIVITY_SCHEMA}.get(args.command, FIT_SCHEMA)
        file_values = load_config(args.config, schema) if args.config else {}
    except (SparseMetaError, OSError) as e:
        print(f"❌ Invalid configuration: {e}")
        return EXIT_ERROR

    seed = args.seed if args.seed is not None else file_values.get("seed", env["seed"])
    out = args.out or env["output_dir"] / args.command
    workers = args.workers or env["workers"]

    if args.command == "simulate":
        values = _merge(file_values, args, ("n_meta", "density", "target_i2"))
        try:
            if args.het_sd is not None:
                values.update(parse_values({"het_sd": args.het_sd}, SIMULATION_SCHEMA))
            sim_config = simulation_config(values)
        except SparseMetaError as e:
            print(f"❌ Invalid configuration: {e}")
            return EXIT_ERROR
        calibrate = args.calibrate or bool(file_values.get("calibrate", False))
        pipeline = MetaAnalysisPipeline(output_dir=out, seed=seed, workers=workers)
        return pipeline.run("simulate", sim_config=sim_config, calibrate=calibrate)

    values = _merge(file_values, args, ("q", "q_max", "level", "univariate_level", "chains", "warmup",
                                        "samples", "target_accept", "max_tree_depth",
                                        "projection_seed", "n_boot", "n_meta", "densities", "het_sds"))
    sampler = sampler_config({k: v for k, v in values.items() if k in SAMPLER_SCHEMA and k != "seed"})
    pipeline = MetaAnalysisPipeline(
        output_dir=out, seed=seed, workers=workers, sampler=sampler,
        q=values.get("q"), q_max=values.get("q_max"), level=values.get("level"),
        univariate_level=values.get("univariate_level"),
        projection_seed=values.get("projection_seed"), n_boot=values.get("n_boot"))
    if args.command == "sensitivity":
        return pipeline.run("sensitivity", sim_config=simulation_config(values),
                            densities=values.get("densities"), het_sds=values.get("het_sds"))
    target = args.dataset if hasattr(args, "dataset") else args.replicates
    return pipeline.run(args.command, target=target)


if __name__ == "__main__":
    sys.exit(main())
