"""Experiment kinds behind the command line: each writes into one output directory."""
from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy
import sklearn

from . import __version__
from . import convergence as cv
from .datasets import (ItemCorpus, SyntheticSpec, compute_stats, generate_synthetic, load_interactions,
                       load_item_texts, write_remap)
from .evaluation import evaluate_by_group, hyperparam_sweep, improvement, ldp_sweep, rows_to_csv
from .federation import run_experiment
from .numeric import make_rng
from .urm import ProviderConfig, make_provider, precomputed_metadata

logger = logging.getLogger(__name__)

# display name -> TrainConfig changes
ABLATIONS = {
    "FedUTR": {},
    "w/o URM": {"no_urm": True},
    "w/o CIFM": {"no_cifm": True},
    "w/o LAM": {"no_lam": True},
    "w/o Regular": {"no_regular": True},
}
FCF = {"mode": "fcf_baseline", "no_urm": True}


def slug(name):
    return "".join(ch if ch.isalnum() else "_" for ch in name.lower()).strip("_")


class RunDir:
    """Output directory bookkeeping: files written, timings, fingerprints."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.timing = []
        self.fingerprints = {}
        self.started = time.time()

    def write(self, name, text):
        target = self.path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")
        return target

    def manifest(self, cfg, command, extra=None):
        outputs = {}
        for p in sorted(self.path.rglob("*")):
            if p.is_file() and p.name != "MANIFEST.json":
                outputs[str(p.relative_to(self.path))] = hashlib.sha256(p.read_bytes()).hexdigest()
        data = {
            "command": command,
            "kind": cfg.kind,
            "seeds": list(cfg.run_seeds()),
            "versions": {"fedutr": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__, "sklearn": sklearn.__version__},
            "wall_seconds": round(time.time() - self.started, 3),
            "data_fingerprints": self.fingerprints,
            "outputs": outputs,
        }
        if extra:
            data.update(extra)
        self.write("MANIFEST.json", json.dumps(data, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------- data

def _fingerprint(dataset, corpus):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.pairs(), dtype="<i8").tobytes())
    h.update("\n".join(corpus.texts).encode("utf-8"))
    return h.hexdigest()


def load_data(cfg, seed=None, run_dir=None):
    """Dataset and item texts named by the config (synthetic when no path is given)."""
    if cfg.interactions:
        dataset = load_interactions(cfg.interactions, cfg.min_interactions)
        if cfg.item_texts:
            corpus = load_item_texts(cfg.item_texts, dataset)
        else:
            corpus = ItemCorpus([""] * dataset.m_items)
        if run_dir is not None:
            write_remap(dataset, run_dir.path)
        key = "file:" + str(cfg.interactions)
    else:
        spec = SyntheticSpec(n=cfg.synthetic_n, m=cfg.synthetic_m, latent_dim=cfg.synthetic_latent_dim,
                             target_avg_interactions=cfg.synthetic_avg, text_vocab=cfg.synthetic_text_vocab,
                             noise=cfg.synthetic_noise)
        data_seed = cfg.data_seed(seed)
        dataset, corpus, _ = generate_synthetic(spec, make_rng(data_seed))
        key = f"synthetic:seed={data_seed}"
    if run_dir is not None:
        run_dir.fingerprints[key] = _fingerprint(dataset, corpus)
    return dataset, corpus


def provider_for(cfg, d=None):
    pc = ProviderConfig(kind=cfg.provider, d=d or cfg.train.d, normalize=cfg.provider_normalize,
                        seed=cfg.train.seed, path=cfg.provider_path)
    return make_provider(pc)


def provider_metadata(cfg):
    """Provider settings for the manifest, including whether precomputed rows were randomly projected."""
    if cfg.kind == "convex_harness":
        return None
    meta = {"kind": cfg.provider, "d": cfg.train.d, "normalize": cfg.provider_normalize}
    if cfg.provider == "precomputed":
        meta.update(path=cfg.provider_path, **precomputed_metadata(cfg.provider_path))
    return meta


# ----------------------------------------------------------------- runners

def _train(cfg, train_cfg, dataset, corpus, run_dir, name, provider=None):
    """One training run; metrics to ``<name>/metrics.jsonl``, wall times to the timing log."""
    provider = provider or provider_for(cfg, train_cfg.d)

    def on_round(row, wall_ms):
        run_dir.timing.append({"run": name, "round": row["round"], "wall_ms": round(wall_ms, 3)})

    result = run_experiment(train_cfg, dataset, provider, corpus, on_round=on_round)
    run_dir.write(f"{name}/metrics.jsonl", result.jsonl())
    return result


def _final(result):
    row = result.final()
    k = result.cfg.eval_k
    return row[f"hr{k}"], row[f"ndcg{k}"]


def _map_runs(jobs, threads):
    """Run independent jobs, possibly on threads; results come back in job order."""
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda job: job(), jobs))
    return [job() for job in jobs]


def run_single(cfg, run_dir):
    dataset, corpus = load_data(cfg, run_dir=run_dir)
    run_dir.write("stats.json", compute_stats(dataset).to_json() + "\n")
    result = _train(cfg, cfg.train, dataset, corpus, run_dir, "run")
    # the top-level metrics file is the single run's stream
    run_dir.write("metrics.jsonl", result.jsonl())
    hr, ndcg = _final(result)
    k = cfg.train.eval_k
    rows = [{"run": "single", "seed": cfg.train.seed, "round": result.final()["round"],
             f"hr{k}": hr, f"ndcg{k}": ndcg}]
    run_dir.write("summary.csv", rows_to_csv(rows))
    return rows


def _suite(cfg, run_dir, variants):
    """Every variant on every seed; rows carry (variant, seed, metrics, per-group HR)."""
    k = cfg.train.eval_k
    jobs, keys = [], []
    inner_threads = 1 if cfg.train.threads > 1 else cfg.train.threads
    data = {s: load_data(cfg, s, run_dir) for s in cfg.run_seeds()}
    for seed in cfg.run_seeds():
        dataset, corpus = data[seed]
        for name, change in variants.items():
            tc = cfg.train.replace(seed=seed, threads=inner_threads, **change)
            jobs.append(lambda tc=tc, ds=dataset, co=corpus, n=f"{slug(name)}/seed{seed}":
                        _train(cfg, tc, ds, co, run_dir, n))
            keys.append((name, seed))
    results = _map_runs(jobs, cfg.train.threads)
    rows = []
    for (name, seed), res in zip(keys, results):
        hr, ndcg = _final(res)
        row = {"variant": name, "seed": seed, f"hr{k}": hr, f"ndcg{k}": ndcg}
        for g in res.final()["per_group"]:
            row[f"group{g['group']}_hr"] = g["hr"]
        rows.append(row)
    return rows, dict(zip(keys, results))


def run_ablation_suite(cfg, run_dir):
    rows, _ = _suite(cfg, run_dir, ABLATIONS)
    k = cfg.train.eval_k
    drops = []
    for seed in cfg.run_seeds():
        base = next(r[f"hr{k}"] for r in rows if r["seed"] == seed and r["variant"] == "FedUTR")
        per = {r["variant"]: base - r[f"hr{k}"] for r in rows if r["seed"] == seed and r["variant"] != "FedUTR"}
        worst = max(per, key=per.get)
        drops.append({"seed": seed, **{f"drop[{v}]": d for v, d in per.items()}, "largest_drop": worst})
    run_dir.write("summary.csv", rows_to_csv(rows))
    run_dir.write("drops.csv", rows_to_csv(drops))
    return rows


def run_group_eval(cfg, run_dir):
    """FedUTR against FCF per sparsity group, with the relative margin of each group."""
    rows, results = _suite(cfg, run_dir, {"FedUTR": {}, "FCF": FCF})
    k = cfg.train.eval_k
    table = []
    for seed in cfg.run_seeds():
        ours = results[("FedUTR", seed)]
        base = results[("FCF", seed)]
        for g_ours, g_base in zip(ours.final()["per_group"], base.final()["per_group"]):
            table.append({"seed": seed, "group": g_ours["label"], "fedutr_hr": g_ours["hr"],
                          "fcf_hr": g_base["hr"], "relative_margin_pct": improvement(g_ours["hr"], g_base["hr"]),
                          "n_users": g_ours["n_users"]})
    run_dir.write("summary.csv", rows_to_csv(rows))
    run_dir.write("groups.csv", rows_to_csv(table))
    return table


def run_ldp(cfg, run_dir):
    rows = []
    for seed in cfg.run_seeds():
        dataset, corpus = load_data(cfg, seed, run_dir)

        def run(tc, ds, prov, co, seed=seed):
            return _train(cfg, tc, ds, co, run_dir, f"delta{tc.ldp_scale:g}/seed{seed}", prov)

        for r in ldp_sweep(cfg.train.replace(seed=seed), dataset, provider_for(cfg), corpus,
                           cfg.ldp_scales, run=run):
            rows.append({"seed": seed, **r})
    run_dir.write("summary.csv", rows_to_csv(rows))
    return rows


def run_hyper(cfg, run_dir, axis):
    values = cfg.lambda_values if axis == "lambda" else cfg.dim_values
    rows = []
    for seed in cfg.run_seeds():
        dataset, corpus = load_data(cfg, seed, run_dir)

        def run(tc, ds, prov, co, seed=seed):
            value = tc.lam if axis == "lambda" else tc.d
            return _train(cfg, tc, ds, co, run_dir, f"{axis}{value:g}/seed{seed}", prov)

        for r in hyperparam_sweep(cfg.train.replace(seed=seed), dataset, lambda d: provider_for(cfg, d),
                                  corpus, axis, values, run=run):
            rows.append({"seed": seed, **r})
    run_dir.write("summary.csv", rows_to_csv(rows))
    return rows


def plug_and_play_table(pairs, k=10):
    """Rows FCF / FCF w/ URM / Improvement from ``[(random_metrics, urm_metrics), ...]`` per seed."""
    base = np.mean([p[0] for p in pairs], axis=0)
    urm = np.mean([p[1] for p in pairs], axis=0)
    return [
        {"Method": "FCF", f"HR@{k}": f"{base[0]:.4f}", f"NDCG@{k}": f"{base[1]:.4f}"},
        {"Method": "FCF w/ URM", f"HR@{k}": f"{urm[0]:.4f}", f"NDCG@{k}": f"{urm[1]:.4f}"},
        {"Method": "Improvement", f"HR@{k}": f"{improvement(urm[0], base[0]):.2f}%",
         f"NDCG@{k}": f"{improvement(urm[1], base[1]):.2f}%"},
    ]


def run_plug_and_play(cfg, run_dir):
    """FCF with random item rows against FCF whose item rows come from the provider."""
    k = cfg.train.eval_k
    pairs, per_seed = [], []
    for seed in cfg.run_seeds():
        dataset, corpus = load_data(cfg, seed, run_dir)
        provider = provider_for(cfg)
        base = _train(cfg, cfg.train.replace(seed=seed, **FCF), dataset, corpus, run_dir, f"fcf/seed{seed}")
        urm = _train(cfg, cfg.train.replace(seed=seed, mode="fcf_baseline", no_urm=False), dataset, corpus,
                     run_dir, f"fcf_w_urm/seed{seed}", provider)
        pairs.append((_final(base), _final(urm)))
        per_seed.append({"seed": seed, f"fcf_hr{k}": pairs[-1][0][0], f"urm_hr{k}": pairs[-1][1][0],
                         f"fcf_ndcg{k}": pairs[-1][0][1], f"urm_ndcg{k}": pairs[-1][1][1]})
    table = plug_and_play_table(pairs, k)
    run_dir.write("summary.csv", rows_to_csv(per_seed))
    run_dir.write("plug_and_play.csv", rows_to_csv(table))
    run_dir.write("plug_and_play.txt", format_table(table))
    return table


def format_table(rows):
    cols = list(rows[0])
    width = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    line = lambda r: "  ".join(str(r[c]).ljust(width[c]) for c in cols)
    return "\n".join([line({c: c for c in cols}), "  ".join("-" * width[c] for c in cols)]
                     + [line(r) for r in rows]) + "\n"


def run_harness(cfg, run_dir):
    base = cv.ConvexTestbedSpec(n=cfg.harness_n, p=cfg.harness_p, mu=cfg.harness_mu, L=cfg.harness_L,
                                local_epochs=cfg.harness_local_epochs, sigma=cfg.harness_sigma,
                                seed=cfg.train.seed)
    fits = {}
    for variant in cv.VARIANTS:
        lam_l1 = cfg.harness_lam_l1 if variant == "with_l1_prox" else 0.0
        spec = cv.ConvexTestbedSpec(**{**asdict(base), "lam_l1": lam_l1})
        trace = cv.run_fedavg_quadratic(spec, variant, cfg.harness_T, cfg.harness_replicates)
        fit = cv.fit_rate(trace.gap, cfg.harness_burn_in)
        _, envelope_ok = cv.rate_envelope(trace.gap, fit)
        fits[variant] = {**fit.summary(), "envelope_within_2x": envelope_ok, "f_star": trace.f_star,
                         "max_drift": float(trace.max_drift.max())}
        cv.write_gap_csv(run_dir.path / f"gap_{variant}.csv", trace.gap)
    drift = cv.drift_comparison(base, range(cfg.harness_drift_seeds), cfg.harness_T, replicates=4)
    fits["drift_pairs_lam_not_larger"] = sum(r["lam_drift"] <= r["plain_drift"] for r in drift)
    fits["drift_pairs"] = len(drift)
    cv.write_fit_json(run_dir.path / "fit_summary.json", fits)
    run_dir.write("drift.csv", rows_to_csv(drift))
    summary = [{"variant": v, "r2": fits[v]["r2"], "C": fits[v]["C"], "gamma": fits[v]["gamma"],
                "passed": fits[v]["passed"]} for v in cv.VARIANTS]
    run_dir.write("summary.csv", rows_to_csv(summary))
    return fits


KIND_RUNNERS = {
    "single": run_single,
    "ablation_suite": run_ablation_suite,
    "group_eval": run_group_eval,
    "ldp_sweep": run_ldp,
    "lambda_sweep": lambda cfg, rd: run_hyper(cfg, rd, "lambda"),
    "dim_sweep": lambda cfg, rd: run_hyper(cfg, rd, "embed_dim"),
    "plug_and_play": run_plug_and_play,
    "convex_harness": run_harness,
}


def execute(cfg, out=None, command="run"):
    """Run ``cfg.kind`` into ``out`` (default ``cfg.out``); returns the RunDir."""
    run_dir = RunDir(out or cfg.out)
    run_dir.write("config.resolved", cfg.dumps())
    KIND_RUNNERS[cfg.kind](cfg, run_dir)
    run_dir.write("timing.jsonl", "".join(json.dumps(t, sort_keys=True) + "\n" for t in run_dir.timing))
    run_dir.manifest(cfg, command, {"provider": provider_metadata(cfg)})
    return run_dir
