"""Command-line entry point orchestrating the whole pipeline.

Subcommands: ``dataset gen``, ``pyramid-dump``, ``train``, ``extract``,
``pca fit|apply``, ``index build``, ``eval``, ``ablate``, ``sigma-table``,
``gradcheck``. Configuration files are TOML or JSON; flags override file
values, unknown keys are rejected, and every command that produces output
writes a ``run_config.json`` echo beside it so runs can be replayed.
All randomness flows from the single configured seed. ``--threads`` (or
``MRVLAD_THREADS``) caps worker count for descriptor extraction.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace

import numpy as np

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from . import postproc, pyramid, retrieval, storage, training, vlad
from .dataset import load_image, load_manifest, save_image
from .errors import MrvladError, ConfigError
from .synthetic import SyntheticWorldConfig, generate_synthetic

_TRAIN_KEYS = {
    "margin", "epochs", "lr", "lr_decay", "lr_decay_every", "momentum",
    "weight_decay", "positive_radius", "negative_radius", "negative_pool",
    "negatives_per_query", "augmentation", "seed", "checkpoint_every",
    "val_every", "strict_determinism", "vocab_size", "scale_specific",
    "val_radius", "pyramid",
}
_PYRAMID_KEYS = {"factors", "mode", "gaussian_factor", "gaussian_sigma",
                 "min_feature_extent"}
_DATASET_KEYS = set(SyntheticWorldConfig.__dataclass_fields__)
_GRID_KEYS = {"epochs", "lr", "vocab_size", "radius", "seed", "runs", "ns"}
_GRID_RUN_KEYS = {"name", "factors", "mode", "augmentation", "eval_variant",
                  "gaussian_factor", "gaussian_sigma"}


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MRVLAD_THREADS", "1")))
    except ValueError:
        return 1


def _load_config_file(path) -> dict:
    if str(path).endswith(".json"):
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    with open(path, "rb") as f:
        return tomllib.load(f)


def _reject_unknown(cfg: dict, allowed: set, where: str):
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def _parse_factors(text: str):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        val = float(tok)
        out.append(int(val) if val == int(val) else val)
    if not out:
        raise ConfigError(f"empty factor list {text!r}")
    return tuple(out)


def _pyramid_from_dict(d: dict, where: str = "pyramid") -> pyramid.PyramidConfig:
    _reject_unknown(d, _PYRAMID_KEYS, where)
    kw = dict(d)
    if "factors" in kw:
        kw["factors"] = tuple(kw["factors"]) if not isinstance(kw["factors"], str) \
            else _parse_factors(kw["factors"])
    return pyramid.PyramidConfig(**kw)


def _write_echo(out_dir, command: str, merged: dict):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.json"), "w", encoding="utf-8") as f:
        json.dump({"command": command, "config": merged}, f, indent=2, default=str)


def _map_ordered(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_dataset_gen(args) -> int:
    merged = _load_config_file(args.config) if args.config else {}
    _reject_unknown(merged, _DATASET_KEYS, "dataset config")
    if args.seed is not None:
        merged["seed"] = args.seed
    cfg = SyntheticWorldConfig(**merged)
    ds, _ = generate_synthetic(cfg, args.out)
    _write_echo(args.out, "dataset gen", asdict(cfg))
    counts = ds.split_counts()
    print(f"generated {len(ds)} records into {args.out}")
    for split, n in counts.items():
        print(f"  {split:10s} {n}")
    return 0


def _cmd_pyramid_dump(args) -> int:
    factors = _parse_factors(args.factors)
    if args.mode == pyramid.GAUSSIAN:
        cfg = pyramid.PyramidConfig(factors=factors, mode=args.mode,
                                    gaussian_factor=args.gaussian_factor,
                                    gaussian_sigma=args.sigma)
    else:
        cfg = pyramid.PyramidConfig(factors=factors, mode=args.mode)
    img = load_image(args.input)
    p = pyramid.build_pyramid(img, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    meta = []
    for i, ((factor, level), s_eff) in enumerate(zip(p.levels, p.sigma_eff)):
        name = f"level_{i:02d}.png"
        save_image(os.path.join(args.out_dir, name), level)
        meta.append({"level": i, "factor": factor, "width": level.shape[1],
                     "height": level.shape[0],
                     "sigma_eff": s_eff})
    with open(os.path.join(args.out_dir, "pyramid.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    _write_echo(args.out_dir, "pyramid-dump", {
        "input": args.input, "mode": args.mode, "factors": list(factors),
        "gaussian_factor": args.gaussian_factor, "sigma": args.sigma,
    })
    print(f"wrote {len(meta)} levels to {args.out_dir}")
    return 0


def _train_config_from(args):
    merged = _load_config_file(args.config) if args.config else {}
    _reject_unknown(merged, _TRAIN_KEYS, "train config")
    pcfg = _pyramid_from_dict(merged.pop("pyramid", {}))
    vocab_size = int(merged.pop("vocab_size", 8))
    scale_specific = bool(merged.pop("scale_specific", False))
    val_radius = float(merged.pop("val_radius", 25.0))
    for flag in ("epochs", "lr", "seed", "margin"):
        v = getattr(args, flag, None)
        if v is not None:
            merged[flag] = v
    if getattr(args, "factors", None):
        pcfg = replace(pcfg, factors=_parse_factors(args.factors))
    cfg = training.TrainConfig(pyramid=pcfg, **merged)
    return cfg, vocab_size, scale_specific, val_radius


def _cmd_train(args) -> int:
    cfg, vocab_size, scale_specific, val_radius = _train_config_from(args)
    ds = load_manifest(args.manifest)
    model = None
    if scale_specific:
        model = training.initialize_model(ds, cfg.pyramid, vocab_size,
                                          seed=cfg.seed, scale_specific=True)
    _write_echo(args.out, "train", {
        "manifest": args.manifest, "vocab_size": vocab_size,
        "scale_specific": scale_specific, "val_radius": val_radius,
        **json.loads(json.dumps(asdict(cfg), default=str)),
    })
    training.train(
        ds, cfg, model=model, out_dir=args.out, vocab_size=vocab_size,
        val_radius=val_radius,
        log=lambda s: print(s.to_json(), flush=True),
    )
    print(f"checkpoints in {args.out}")
    return 0


def _cmd_extract(args) -> int:
    model = storage.load_checkpoint(args.checkpoint)
    if args.variant not in vlad.VARIANTS:
        raise ConfigError(f"variant must be one of {vlad.VARIANTS}")
    pcfg = pyramid.PyramidConfig(
        factors=_parse_factors(args.factors), mode=args.mode,
        gaussian_factor=args.gaussian_factor, gaussian_sigma=args.sigma,
    ) if args.mode == pyramid.GAUSSIAN else pyramid.PyramidConfig(
        factors=_parse_factors(args.factors))
    ds = load_manifest(args.manifest, check_images=False)
    records = ds.records if args.split == "all" else ds.split(args.split)
    if not records:
        raise ConfigError(f"no records in split {args.split!r}")
    pca_model = storage.load_pca(args.pca) if args.pca else None

    def one(record):
        try:
            d = vlad.describe(load_image(record.path), model, args.variant, pcfg)
            v = postproc.apply_pca(d.values, pca_model) if pca_model else d.values
            return record.id, v, None
        except (MrvladError, OSError) as e:
            return record.id, None, f"{type(e).__name__}: {e}"

    results = _map_ordered(one, records, args.threads)
    rows, ids, failures = [], [], []
    for rid, v, err in results:
        if err is None:
            rows.append(v)
            ids.append(rid)
        else:
            failures.append((rid, err))
            print(f"error: record {rid}: {err}", file=sys.stderr)
    if not rows:
        print("error: no records could be processed", file=sys.stderr)
        return 1
    storage.write_descriptor_file(args.out, np.vstack(rows), ids, args.variant)
    _write_echo(os.path.dirname(os.path.abspath(args.out)) or ".", "extract", {
        "manifest": args.manifest, "checkpoint": args.checkpoint,
        "variant": args.variant, "factors": args.factors, "mode": args.mode,
        "split": args.split, "pca": args.pca, "out": args.out,
    })
    print(f"wrote {len(ids)} descriptors (dim {rows[0].shape[0]}) to {args.out}")
    if failures:
        print(f"{len(failures)} records failed", file=sys.stderr)
        return 1
    return 0


def _cmd_pca_fit(args) -> int:
    matrix, _, _, _ = storage.read_descriptor_file(args.descriptors)
    model = postproc.fit_pca(matrix, args.out_dim, eps=args.eps)
    storage.save_pca(model, args.out)
    print(f"fitted {model.in_dim} -> {model.out_dim} whitening projection; "
          f"top eigenvalue {model.eigenvalues[0]:.4g}")
    return 0


def _cmd_pca_apply(args) -> int:
    matrix, ids, variant, _ = storage.read_descriptor_file(args.descriptors)
    model = storage.load_pca(args.model)
    out = postproc.apply_pca(matrix, model)
    storage.write_descriptor_file(args.out, out, ids, variant)
    print(f"wrote {out.shape[0]} compressed descriptors (dim {out.shape[1]}) to {args.out}")
    return 0


def _cmd_index_build(args) -> int:
    matrix, ids, _, _ = storage.read_descriptor_file(args.descriptors)
    index = retrieval.build_index(matrix, ids)
    np.savez(args.out, matrix=index.matrix, ids=np.array(index.ids))
    print(f"indexed {len(index)} descriptors (dim {index.dim}) into {args.out}")
    return 0


def _load_db_index(path) -> retrieval.DescriptorIndex:
    if str(path).endswith(".npz"):
        data = np.load(path, allow_pickle=False)
        return retrieval.build_index(data["matrix"], [str(i) for i in data["ids"]])
    matrix, ids, _, _ = storage.read_descriptor_file(path)
    return retrieval.build_index(matrix, ids)


def _cmd_eval(args) -> int:
    index = _load_db_index(args.db)
    qmatrix, qids, _, _ = storage.read_descriptor_file(args.queries)
    ds = load_manifest(args.manifest, check_images=False)
    queries = [(qid, qmatrix[i], ds.by_id[qid].position) for i, qid in enumerate(qids)]
    db_positions = {i: ds.by_id[i].position for i in index.ids}
    ns = tuple(int(n) for n in _parse_factors(args.ns))
    report = retrieval.evaluate_recall(index, queries, db_positions,
                                       radius=args.radius, ns=ns)
    print(report.format_table())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "recall_report.json"), "w",
                  encoding="utf-8") as f:
            f.write(report.to_json())
        if args.csv:
            report.write_ranks_csv(os.path.join(args.out, "per_query_ranks.csv"))
        _write_echo(args.out, "eval", {
            "db": args.db, "queries": args.queries, "manifest": args.manifest,
            "radius": args.radius, "ns": list(ns),
        })
    return 0


def _cmd_sigma_table(args) -> int:
    factors = [float(f) for f in _parse_factors(args.factors)]
    print(f"{'level':>5s} | " + " | ".join(f"F={f:<20.17g}" for f in factors))
    rows = [pyramid.effective_sigma_ladder(f, args.sigma, args.levels)
            for f in factors]
    for i in range(args.levels):
        cells = " | ".join(f"{rows[j][i]:<22.17g}" for j in range(len(factors)))
        print(f"{i + 1:>5d} | {cells}")
    return 0


def _cmd_gradcheck(args) -> int:
    err = training.gradient_check(seed=args.seed, full_stack=not args.vocab_only)
    status = "PASS" if err < 1e-4 else "FAIL"
    print(f"max relative gradient error: {err:.3e}  [{status}]")
    return 0 if err < 1e-4 else 1


def _cmd_ablate(args) -> int:
    grid = _load_config_file(args.grid)
    _reject_unknown(grid, _GRID_KEYS, "ablation grid")
    runs = grid.get("runs", [])
    if not runs:
        raise ConfigError("ablation grid has no runs")
    ds = load_manifest(args.manifest)
    epochs = int(grid.get("epochs", 35))
    lr = float(grid.get("lr", 1e-3))
    vocab_size = int(grid.get("vocab_size", 8))
    radius = float(grid.get("radius", 25.0))
    seed = int(grid.get("seed", 0))
    ns = tuple(int(n) for n in grid.get("ns", (1, 5, 20)))
    os.makedirs(args.out, exist_ok=True)
    _write_echo(args.out, "ablate", {"manifest": args.manifest, **grid})

    rows = []
    failed = 0
    for run in runs:
        _reject_unknown(run, _GRID_RUN_KEYS, f"run {run.get('name', '?')}")
        name = run.get("name") or f"L{len(run.get('factors', (1,)))}"
        try:
            pkw = {"factors": tuple(run.get("factors", (1,)))}
            if run.get("mode", pyramid.SUBSAMPLE) == pyramid.GAUSSIAN:
                pkw.update(mode=pyramid.GAUSSIAN,
                           gaussian_factor=float(run.get("gaussian_factor", math.sqrt(2))),
                           gaussian_sigma=float(run.get("gaussian_sigma", 1.0)))
            pcfg = pyramid.PyramidConfig(**pkw)
            tcfg = training.TrainConfig(
                epochs=epochs, lr=lr, seed=seed, pyramid=pcfg,
                augmentation=run.get("augmentation", "none"), val_every=0,
            )
            state, _ = training.train(ds, tcfg, vocab_size=vocab_size)
            variant = run.get("eval_variant", vlad.BR_MLR)
            eval_pcfg = pcfg if variant == vlad.BR_MLR else replace(pcfg, factors=(1,))
            db = sorted(ds.split("test_db"), key=lambda r: r.id)
            qs = sorted(ds.split("test_q"), key=lambda r: r.id)
            index = retrieval.build_index(
                [vlad.describe(load_image(r.path), state.model, variant,
                               eval_pcfg).values for r in db],
                [r.id for r in db])
            queries = [(r.id, vlad.describe(load_image(r.path), state.model,
                                            variant, eval_pcfg).values,
                        r.position) for r in qs]
            report = retrieval.evaluate_recall(
                index, queries, {r.id: r.position for r in db}, radius, ns=ns)
            rows.append({"name": name, "variant": variant,
                         "factors": list(pcfg.factors),
                         "augmentation": tcfg.augmentation,
                         "recall": {str(n): report.recalls[n] for n in ns}})
            rline = "/".join(f"{report.recalls[n]*100:.1f}" for n in ns)
            print(f"{name}: R@{'/'.join(map(str, ns))} = {rline}", flush=True)
        except MrvladError as e:
            failed += 1
            rows.append({"name": name, "error": f"{type(e).__name__}: {e}"})
            print(f"{name}: FAILED ({e})", file=sys.stderr, flush=True)
    with open(os.path.join(args.out, "ablation_report.json"), "w",
              encoding="utf-8") as f:
        json.dump(rows, f, indent=2)
    width = max(len(r["name"]) for r in rows)
    lines = [f"{'config':<{width}s} | R@" + "/".join(map(str, ns))]
    for r in rows:
        val = "ERROR" if "error" in r else \
            "/".join(f"{r['recall'][str(n)]*100:5.1f}" for n in ns)
        lines.append(f"{r['name']:<{width}s} | {val}")
    table = "\n".join(lines)
    with open(os.path.join(args.out, "ablation_report.txt"), "w",
              encoding="utf-8") as f:
        f.write(table + "\n")
    print(table)
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrvlad",
                                description="Multi-resolution VLAD place descriptors")
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help="worker cap for descriptor extraction "
                        "(default: MRVLAD_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset operations")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    gen = ds_sub.add_parser("gen", help="generate a synthetic place world")
    gen.add_argument("--config", help="TOML/JSON world config")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", required=True)
    gen.set_defaults(fn=_cmd_dataset_gen)

    pd = sub.add_parser("pyramid-dump", help="write pyramid levels to disk")
    pd.add_argument("--input", required=True)
    pd.add_argument("--mode", choices=[pyramid.SUBSAMPLE, pyramid.GAUSSIAN],
                    default=pyramid.SUBSAMPLE)
    pd.add_argument("--factors", required=True, help="comma list, e.g. 1,2,4")
    pd.add_argument("--gaussian-factor", type=float, default=math.sqrt(2.0))
    pd.add_argument("--sigma", type=float, default=1.0)
    pd.add_argument("--out-dir", required=True)
    pd.set_defaults(fn=_cmd_pyramid_dump)

    tr = sub.add_parser("train", help="triplet training on a manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--config", help="TOML/JSON training config")
    tr.add_argument("--out", required=True, help="checkpoint directory")
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--margin", type=float, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--factors", default=None, help="override pyramid factors")
    tr.set_defaults(fn=_cmd_train)

    ex = sub.add_parser("extract", help="descriptors for every manifest record")
    ex.add_argument("--manifest", required=True)
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--variant", default=vlad.BR_MLR, choices=list(vlad.VARIANTS))
    ex.add_argument("--factors", default="1", help="pyramid factors for BR_MLR")
    ex.add_argument("--mode", choices=[pyramid.SUBSAMPLE, pyramid.GAUSSIAN],
                    default=pyramid.SUBSAMPLE)
    ex.add_argument("--gaussian-factor", type=float, default=math.sqrt(2.0))
    ex.add_argument("--sigma", type=float, default=1.0)
    ex.add_argument("--split", default="all")
    ex.add_argument("--pca", default=None, help="apply a fitted PCA model")
    ex.add_argument("--out", required=True)
    ex.set_defaults(fn=_cmd_extract)

    pca = sub.add_parser("pca", help="whitening PCA")
    pca_sub = pca.add_subparsers(dest="pca_command", required=True)
    fit = pca_sub.add_parser("fit")
    fit.add_argument("--descriptors", required=True)
    fit.add_argument("--out-dim", type=int, required=True)
    fit.add_argument("--eps", type=float, default=1e-9)
    fit.add_argument("--out", required=True)
    fit.set_defaults(fn=_cmd_pca_fit)
    app = pca_sub.add_parser("apply")
    app.add_argument("--descriptors", required=True)
    app.add_argument("--model", required=True)
    app.add_argument("--out", required=True)
    app.set_defaults(fn=_cmd_pca_apply)

    idx = sub.add_parser("index", help="descriptor index")
    idx_sub = idx.add_subparsers(dest="index_command", required=True)
    ib = idx_sub.add_parser("build")
    ib.add_argument("--descriptors", required=True)
    ib.add_argument("--out", required=True)
    ib.set_defaults(fn=_cmd_index_build)

    ev = sub.add_parser("eval", help="Recall@N under a localization radius")
    ev.add_argument("--db", required=True, help="descriptor file or .npz index")
    ev.add_argument("--queries", required=True, help="query descriptor file")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--radius", type=float, default=25.0)
    ev.add_argument("--ns", default="1,5,20")
    ev.add_argument("--out", default=None)
    ev.add_argument("--csv", action="store_true", help="per-query rank CSV")
    ev.set_defaults(fn=_cmd_eval)

    ab = sub.add_parser("ablate", help="train+eval a grid of configurations")
    ab.add_argument("--manifest", required=True)
    ab.add_argument("--grid", required=True, help="TOML/JSON grid file")
    ab.add_argument("--out", required=True)
    ab.set_defaults(fn=_cmd_ablate)

    st = sub.add_parser("sigma-table", help="effective blur ladder per factor")
    st.add_argument("--factors", default="1.4142135623730951,2")
    st.add_argument("--sigma", type=float, default=1.0)
    st.add_argument("--levels", type=int, default=6)
    st.set_defaults(fn=_cmd_sigma_table)

    gc = sub.add_parser("gradcheck", help="whole-pipeline finite-difference check")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--vocab-only", action="store_true")
    gc.set_defaults(fn=_cmd_gradcheck)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MrvladError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
