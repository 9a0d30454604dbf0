"""Pipeline driver: every stage as a subcommand over one JSON config.

All outputs land under a run directory with a manifest; every command is
fully determined by (config, seed), so reruns produce identical files.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import data, gpt, meshing, metrics
from . import tree as vtree
from . import vqvae

DEFAULT_CONFIG = {
    "seed": 0,
    "paths": {"corpus": "corpus", "run": "run"},
    "preprocess": {"height_cap": 20, "augment": True},
    "synth": {"n": 10, "max_depth": 3, "nodes_per_branch": [3, 6],
              "bifurcation_prob": 0.7, "tortuosity_amp": 0.15},
    "vqvae": {"d_model": 256, "n_layers": 2, "heads": 4,
              "tokens_per_node": 16, "code_dim": 64, "codebook_size": 256,
              "commitment": 0.25, "epochs": 100, "lr": 1e-4,
              "lr_decay": 1.0},
    "gpt": {"n_layers": 4, "heads": 4, "d_model": 256, "context": 4096,
            "dropout": 0.0, "epochs": 100, "lr": 1e-4},
    "sampler": {"beams": 1, "temperature": 1.0, "top_k": 0,
                "max_tokens": 2048},
    "mesh": {"resolution": 64, "band_voxels": 4.0},
    "evaluate": {"points": 1000},
}


class ConfigError(ValueError):
    pass


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=()):
    """Defaults <- config file <- `section.key=value` overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            cfg = _merge(cfg, json.load(fh))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return cfg


def _run_dir(cfg):
    run = Path(cfg["paths"]["run"])
    run.mkdir(parents=True, exist_ok=True)
    return run


def _update_manifest(run, command, outputs, cfg):
    path = run / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest[command] = {"outputs": sorted(str(o) for o in outputs),
                         "seed": cfg["seed"]}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_csv(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# ----------------------------------------------------------------- commands

def cmd_synth(cfg, log=print):
    s = cfg["synth"]
    synth_cfg = data.SynthConfig(
        max_depth=s["max_depth"],
        nodes_per_branch=tuple(s["nodes_per_branch"]),
        bifurcation_prob=s["bifurcation_prob"],
        tortuosity_amp=s["tortuosity_amp"],
        seed=cfg["seed"])
    corpus = data.synth_corpus(synth_cfg, s["n"],
                               height_cap=cfg["preprocess"]["height_cap"])
    out = Path(cfg["paths"]["corpus"])
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for tid, t in zip(corpus.ids, corpus.trees):
        p = out / f"{tid}.json"
        vtree.save_json(t, p)
        paths.append(p)
    log(f"wrote {len(paths)} synthetic trees to {out}")
    _update_manifest(_run_dir(cfg), "synth", paths, cfg)
    return paths


def cmd_preprocess(cfg, log=print):
    pp = cfg["preprocess"]
    corpus = data.load_corpus(cfg["paths"]["corpus"],
                              height_cap=pp["height_cap"])
    if pp["augment"]:
        corpus = data.augment_corpus(corpus, seed=cfg["seed"])
    run = _run_dir(cfg)
    out = run / "dataset.jsonl"
    n_nodes = n_markers = 0
    with open(out, "w") as fh:
        for tid, tag, t in zip(corpus.ids, corpus.tags, corpus.trees):
            seq = vtree.serialize(t)
            markers = int((np.abs(seq).max(axis=1) < vtree.NULL_THRESHOLD).sum())
            n_nodes += t.num_nodes()
            n_markers += markers
            fh.write(json.dumps({"id": tid, "tag": tag,
                                 "attrs": seq.tolist()}) + "\n")
    log(f"dataset: {len(corpus)} trees, {n_nodes} nodes, "
        f"{n_markers} null markers -> {out}")
    _update_manifest(run, "preprocess", [out], cfg)
    return out


def _load_dataset(run):
    path = run / "dataset.jsonl"
    if not path.exists():
        raise ConfigError(f"dataset not found at {path}; run preprocess first")
    entries = []
    with open(path) as fh:
        for line in fh:
            doc = json.loads(line)
            entries.append((doc["id"], np.asarray(doc["attrs"])))
    return entries


def cmd_train_vqvae(cfg, resume=False, log=print):
    run = _run_dir(cfg)
    entries = _load_dataset(run)
    dataset = [seq for _, seq in entries]
    v = cfg["vqvae"]
    ckpt = run / "vqvae.ckpt"
    epochs_done = 0
    if resume:
        if not ckpt.exists():
            raise ConfigError(f"cannot resume: {ckpt} missing")
        from .autodiff import load_checkpoint
        net = vqvae._VqVaeNet.from_checkpoint(ckpt)
        epochs_done = load_checkpoint(ckpt)[1].get("epochs_done", 0)
    else:
        net = vqvae._VqVaeNet(
            d_model=v["d_model"], n_layers=v["n_layers"], heads=v["heads"],
            tokens_per_node=v["tokens_per_node"], code_dim=v["code_dim"],
            codebook_size=v["codebook_size"], seed=cfg["seed"])
    history = vqvae.train_vqvae(
        dataset, net, epochs=v["epochs"], lr=v["lr"],
        commitment=v["commitment"], lr_decay=v["lr_decay"],
        seed=cfg["seed"] + epochs_done, log_every=0)
    for h in history:
        h["epoch"] += epochs_done
    net.save(ckpt, extra_meta={"epochs_done": epochs_done + v["epochs"]})
    csv_path = run / "vqvae_loss.csv"
    old = []
    if resume and csv_path.exists():
        with open(csv_path) as fh:
            old = list(csv.DictReader(fh))
    _write_csv(csv_path, old + history,
               ["epoch", "mean_l1", "perplexity", "dead"])
    log(f"vqvae: {len(history)} epochs, final L1 "
        f"{history[-1]['mean_l1']:.5f} -> {ckpt}")
    _update_manifest(run, "train-vqvae", [ckpt, csv_path], cfg)
    return ckpt


def _encode_corpus(vq_net, dataset, gpt_net):
    corpus = []
    for seq in dataset:
        z = vq_net.encode(seq, check_range=False)
        _, indices = vqvae.quantize(z, vq_net.codebook)
        corpus.append(gpt.with_specials(indices, gpt_net))
    return corpus


def cmd_train_gpt(cfg, resume=False, log=print):
    run = _run_dir(cfg)
    entries = _load_dataset(run)
    vq_ckpt = run / "vqvae.ckpt"
    if not vq_ckpt.exists():
        raise ConfigError(f"vqvae checkpoint missing at {vq_ckpt}")
    vq_net = vqvae._VqVaeNet.from_checkpoint(vq_ckpt)
    g = cfg["gpt"]
    ckpt = run / "gpt.ckpt"
    epochs_done = 0
    if resume:
        if not ckpt.exists():
            raise ConfigError(f"cannot resume: {ckpt} missing")
        from .autodiff import load_checkpoint
        net = gpt._GptNet.from_checkpoint(ckpt)
        if net.codebook_size != vq_net.codebook_size:
            raise ConfigError("checkpoint codebook size mismatch")
        epochs_done = load_checkpoint(ckpt)[1].get("epochs_done", 0)
    else:
        net = gpt._GptNet(codebook_size=vq_net.codebook_size,
                          context=g["context"], n_layers=g["n_layers"],
                          heads=g["heads"], d_model=g["d_model"],
                          dropout=g["dropout"], seed=cfg["seed"])
    corpus = _encode_corpus(vq_net, [seq for _, seq in entries], net)
    history = gpt.train_gpt(corpus, net, epochs=g["epochs"], lr=g["lr"],
                            seed=cfg["seed"] + epochs_done)
    for h in history:
        h["epoch"] += epochs_done
    net.save(ckpt, extra_meta={"epochs_done": epochs_done + g["epochs"]})
    csv_path = run / "gpt_loss.csv"
    old = []
    if resume and csv_path.exists():
        with open(csv_path) as fh:
            old = list(csv.DictReader(fh))
    _write_csv(csv_path, old + history, ["epoch", "loss", "perplexity"])
    log(f"gpt: {len(history)} epochs, final loss "
        f"{history[-1]['loss']:.5f} -> {ckpt}")
    _update_manifest(run, "train-gpt", [ckpt, csv_path], cfg)
    return ckpt


def cmd_generate(cfg, n, log=print):
    run = _run_dir(cfg)
    vq_net = vqvae._VqVaeNet.from_checkpoint(run / "vqvae.ckpt")
    gpt_net = gpt._GptNet.from_checkpoint(run / "gpt.ckpt")
    if gpt_net.codebook_size != vq_net.codebook_size:
        raise ConfigError(
            f"codebook size mismatch: gpt {gpt_net.codebook_size} vs "
            f"vqvae {vq_net.codebook_size}")
    s = cfg["sampler"]
    out_dir = run / "generated"
    out_dir.mkdir(exist_ok=True)
    accepted, rejects = [], {"truncated": 0, "non_divisible": 0,
                             "malformed": 0}
    samples = []
    for i in range(n):
        sampler = gpt.SamplerConfig(beams=s["beams"],
                                    temperature=s["temperature"],
                                    top_k=s["top_k"],
                                    max_tokens=s["max_tokens"],
                                    seed=cfg["seed"] + i)
        result = gpt.generate(gpt_net, sampler)
        entry = {"sample": i, "tokens": int(result.tokens.size),
                 "logprob": result.logprob}
        if result.truncated:
            rejects["truncated"] += 1
            entry["status"] = "rejected:truncated"
            samples.append(entry)
            continue
        try:
            tree = gpt.tokens_to_tree(result.tokens, gpt_net, vq_net)
        except ValueError as exc:
            kind = ("non_divisible" if "divisible" in str(exc)
                    else "malformed")
            rejects[kind] += 1
            entry["status"] = f"rejected:{kind}"
            samples.append(entry)
            continue
        path = out_dir / f"gen{i:04d}.json"
        vtree.save_json(tree, path)
        accepted.append(path)
        entry["status"] = "accepted"
        entry["path"] = path.name
        samples.append(entry)
    report = {"requested": n, "accepted": len(accepted),
              "accept_rate": len(accepted) / n, "rejects": rejects,
              "samples": samples}
    report_path = run / "generation_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log(f"generate: {len(accepted)}/{n} accepted "
        f"(truncated {rejects['truncated']}, "
        f"non-divisible {rejects['non_divisible']}, "
        f"malformed {rejects['malformed']})")
    _update_manifest(run, "generate", accepted + [report_path], cfg)
    return report


def cmd_mesh(cfg, trees_dir=None, log=print):
    run = _run_dir(cfg)
    src = Path(trees_dir) if trees_dir else run / "generated"
    files = sorted(src.glob("*.json"))
    if not files:
        raise ConfigError(f"no tree files under {src}")
    out_dir = run / "meshes"
    out_dir.mkdir(exist_ok=True)
    m = cfg["mesh"]
    written, failures = [], []
    for f in files:
        try:
            tree = vtree.load_json(f)
            mesh = meshing.mesh_tree(tree, resolution=m["resolution"],
                                     band_voxels=m["band_voxels"])
            if mesh.is_empty:
                failures.append({"file": f.name, "reason": "empty field"})
                continue
            path = out_dir / (f.stem + ".obj")
            meshing.export_obj(mesh, path)
            written.append(path)
        except (ValueError, meshing.MeshingError) as exc:
            failures.append({"file": f.name, "reason": str(exc)})
    report_path = run / "mesh_report.json"
    report_path.write_text(json.dumps(
        {"meshed": len(written), "failures": failures},
        indent=2, sort_keys=True) + "\n")
    log(f"mesh: {len(written)}/{len(files)} meshed, "
        f"{len(failures)} failure(s)")
    _update_manifest(run, "mesh", written + [report_path], cfg)
    return written, failures


def _load_eval_side(path):
    path = Path(path)
    meshes = [meshing.load_obj(p) for p in sorted(path.glob("*.obj"))]
    trees = [vtree.load_json(p) for p in sorted(path.glob("*.json"))]
    return meshes, trees


def cmd_evaluate(cfg, generated, reference, log=print):
    run = _run_dir(cfg)
    gen_meshes, gen_trees = _load_eval_side(generated)
    ref_meshes, ref_trees = _load_eval_side(reference)
    if len(gen_meshes) < 2 or len(ref_meshes) < 2:
        raise ConfigError("evaluate needs >= 2 meshes per side")
    n_pts = cfg["evaluate"]["points"]
    seed = cfg["seed"]
    gen_pts = [metrics.sample_points(m, n_pts, seed=seed + i)
               for i, m in enumerate(gen_meshes)]
    # same per-index seeds on both sides so a directory evaluated against
    # itself yields identical point sets (MMD 0, COV 1)
    ref_pts = [metrics.sample_points(m, n_pts, seed=seed + i)
               for i, m in enumerate(ref_meshes)]
    mmd, cov, nna = metrics.mmd_cov_1nna(gen_pts, ref_pts)
    gen_tort = np.concatenate([metrics.branch_tortuosities(t)
                               for t in gen_trees]) if gen_trees else np.array([])
    ref_tort = np.concatenate([metrics.branch_tortuosities(t)
                               for t in ref_trees]) if ref_trees else np.array([])
    gen_len = np.array([metrics.total_length(t) for t in gen_trees])
    ref_len = np.array([metrics.total_length(t) for t in ref_trees])
    tort_cos = (metrics.histogram_cosine(ref_tort, gen_tort)
                if gen_tort.size and ref_tort.size else float("nan"))
    len_cos = (metrics.histogram_cosine(ref_len, gen_len)
               if gen_len.size and ref_len.size else float("nan"))
    report = metrics.MetricReport(
        mmd, cov, nna, tort_cos, len_cos,
        extras={"generated_meshes": len(gen_meshes),
                "reference_meshes": len(ref_meshes),
                "points_per_mesh": n_pts})
    json_path = run / "metrics.json"
    report.to_json(json_path)
    table_path = run / "metrics.txt"
    table_path.write_text(report.to_table() + "\n")
    if gen_tort.size and ref_tort.size:
        metrics.histograms_csv(ref_tort, gen_tort,
                               run / "tortuosity_hist.csv")
    if gen_len.size and ref_len.size:
        metrics.histograms_csv(ref_len, gen_len, run / "length_hist.csv")
    log(report.to_table())
    _update_manifest(run, "evaluate", [json_path, table_path], cfg)
    return report


# --------------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(
        prog="vesselsynth",
        description="vessel tree tokenization, generation, and meshing")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. vqvae.epochs=50")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="write a synthetic corpus")
    sub.add_parser("preprocess", help="corpus -> serialized dataset")
    for name in ("train-vqvae", "train-gpt"):
        p = sub.add_parser(name, help=f"train the {name.split('-')[1]}")
        p.add_argument("--resume", action="store_true",
                       help="continue from the existing checkpoint")
    p = sub.add_parser("generate", help="sample trees from the checkpoints")
    p.add_argument("--n", type=int, default=10)
    p = sub.add_parser("mesh", help="tree JSON files -> watertight OBJ")
    p.add_argument("--trees", help="directory of tree JSON (default: "
                                   "the run's generated/)")
    p = sub.add_parser("evaluate", help="compare generated vs reference")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "preprocess":
            cmd_preprocess(cfg)
        elif args.command == "train-vqvae":
            cmd_train_vqvae(cfg, resume=args.resume)
        elif args.command == "train-gpt":
            cmd_train_gpt(cfg, resume=args.resume)
        elif args.command == "generate":
            cmd_generate(cfg, args.n)
        elif args.command == "mesh":
            cmd_mesh(cfg, trees_dir=args.trees)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.generated, args.reference)
    except (ConfigError, data.EmptyCorpusError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
