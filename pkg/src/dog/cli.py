"""Stage-by-stage pipeline driver.

Every stage reads and writes files under one run directory named by the hash
of the resolved configuration.  Stages skip work whose artifact already
exists with the current hash, so an interrupted pipeline resumes where it
stopped.  Set ``DOG_NUM_THREADS`` to cap BLAS threads.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import datasets
from .augment import (
    SyntheticBatch,
    assemble_augmented_graph,
    decode_synthetic_structures,
    generate_synthetic_latents,
    structure_metrics,
)
from .clustering import ClusterAssignment, balanced_kmeans
from .gae import EncoderInputs, GaeConfig, encode_all, load_gae, save_gae, train_gae
from .graph import AttributedGraph, save_graph
from .ldm import LdmConfig, load_ldm, save_ldm, train_ldm
from .lowrank import (
    CvBudget,
    GcnModel,
    GcnTrainConfig,
    LowRankConfig,
    cross_validate,
    eigen_projection,
    gcn_forward,
    gram_matrix,
    one_hot_training_labels,
    train_node_classifier,
)

log = logging.getLogger("dog")

THREADS_ENV = "DOG_NUM_THREADS"


class StageError(RuntimeError):
    """A stage cannot run: missing upstream artifact or mismatched provenance."""


@dataclass
class RunConfig:
    data: str = "synthetic:cora-like"
    out_dir: str = "runs"
    k: int = 100
    kmeans_normalize: bool = False
    gae: GaeConfig = field(default_factory=GaeConfig)
    ldm: LdmConfig = field(default_factory=LdmConfig)
    omega: float = 0.5
    beta_syn: float = 3.0
    threshold: float = 0.5
    max_degree: int | None = None
    tau: float = 0.1
    gamma: float = 0.2
    eta: float = 0.01
    tnn_features: str = "train"
    gcn: GcnTrainConfig = field(default_factory=GcnTrainConfig)
    n_eval_seeds: int = 1
    compare_baseline: bool = True
    cv_grids: dict | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, sub in (("gae", GaeConfig), ("ldm", LdmConfig), ("gcn", GcnTrainConfig)):
            if key in d and isinstance(d[key], dict):
                d[key] = sub(**d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self) -> "RunConfig":
        """Propagate the run seed into the stage configs."""
        return replace(
            self,
            gae=replace(self.gae, seed=self.seed),
            ldm=replace(self.ldm, seed=self.seed),
            gcn=replace(self.gcn, seed=self.seed),
        )

    def digest(self) -> str:
        d = self.resolved().to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def desk_preset(cfg: RunConfig) -> RunConfig:
    """Short schedules for CPU runs: GAE 200+200 epochs, LDM 500 epochs, T = 200."""
    return replace(
        cfg,
        gae=replace(cfg.gae, phase1_epochs=200, phase2_epochs=200),
        ldm=replace(cfg.ldm, epochs=500, t_max=200),
    )


# --- run directory and provenance ------------------------------------------


class Run:
    def __init__(self, cfg: RunConfig, run_dir: str | None = None, force: bool = False):
        self.cfg = cfg.resolved()
        self.hash = cfg.digest()
        self.dir = run_dir or os.path.join(cfg.out_dir, f"run-{self.hash}")
        self.force = force
        os.makedirs(self.dir, exist_ok=True)
        self._graph = None
        cfg_path = self.path("config.json")
        if os.path.exists(cfg_path):
            with open(cfg_path) as fh:
                old = json.load(fh).get("config_hash")
            if old != self.hash and not force:
                raise StageError(f"{self.dir} holds artifacts of config {old}, not {self.hash}; pass --force to mix")
        self._write_json("config.json", {"config_hash": self.hash, "config": self.cfg.to_dict()})

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def _write_json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def record(self, name: str, stage: str, seconds: float) -> None:
        prov = self.path("provenance.json")
        data = {}
        if os.path.exists(prov):
            with open(prov) as fh:
                data = json.load(fh)
        data[name] = {"config_hash": self.hash, "stage": stage, "seconds": round(seconds, 3)}
        with open(prov, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def artifact_hash(self, name: str) -> str | None:
        p = self.path(name)
        if not os.path.exists(p):
            return None
        if name.endswith(".npz"):
            with np.load(p) as f:
                return str(f["config_hash"])
        if name.endswith(".csv"):
            with open(p) as fh:
                first = fh.readline().strip()
            return first.split("=", 1)[1] if first.startswith("# config_hash=") else None
        sidecar = p + ".json"
        if os.path.exists(sidecar):
            with open(sidecar) as fh:
                return json.load(fh).get("config_hash")
        return None

    def have(self, name: str) -> bool:
        """True when ``name`` exists with this run's hash (else raises unless forced)."""
        h = self.artifact_hash(name)
        if h is None:
            return False
        if h != self.hash and not self.force:
            raise StageError(f"{name} was produced by config {h}, current is {self.hash}; pass --force")
        return True

    def need(self, name: str, stage: str) -> None:
        if not os.path.exists(self.path(name)):
            raise StageError(f"stage {stage!r} needs {name}; run the upstream stage first")
        self.have(name)

    def save_npz(self, name: str, **arrays) -> None:
        with open(self.path(name), "wb") as fh:
            np.savez(fh, config_hash=np.array(self.hash), **arrays)

    def load_npz(self, name: str, stage: str) -> dict:
        self.need(name, stage)
        with np.load(self.path(name)) as f:
            return {k: f[k] for k in f.files}

    def write_csv(self, name: str, header: list[str], rows) -> None:
        buf = io.StringIO()
        buf.write(f"# config_hash={self.hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
        with open(self.path(name), "w", newline="") as fh:
            fh.write(buf.getvalue())

    @property
    def graph(self) -> AttributedGraph:
        if self._graph is None:
            self._graph = load_dataset(self.cfg.data, self.cfg.seed)
        return self._graph


def load_dataset(source: str, seed: int = 0) -> AttributedGraph:
    """``synthetic:cora-like[:scale]``, ``synthetic:sbm``, ``cora`` (via ``$DOG_CORA_DIR``) or a directory."""
    if source.startswith("synthetic:"):
        parts = source.split(":")
        if parts[1] == "cora-like":
            scale = float(parts[2]) if len(parts) > 2 else 1.0
            return datasets.make_cora_like(scale, seed=0)
        if parts[1] == "sbm":
            return datasets.make_attributed_sbm(seed=0)
        raise ValueError(f"unknown synthetic dataset {source!r}")
    if source == "cora":
        d = datasets.find_cora()
        if d is None:
            raise StageError(f"Cora text files not found; set ${datasets.CORA_ENV}")
        return datasets.load_graph_dir(d)
    return datasets.load_graph_dir(source)


def _timed(run: Run, name: str, stage: str, fn):
    t0 = time.perf_counter()
    fn()
    run.record(name, stage, time.perf_counter() - t0)
    log.info("%s -> %s (%.1fs)", stage, name, time.perf_counter() - t0)


def _n_per_class(run: Run) -> int:
    g = run.graph
    n_train = len(g.nodes_in("train"))
    return int(round(run.cfg.beta_syn * n_train / g.n_classes))


# --- stages -----------------------------------------------------------------


def cmd_cluster(run: Run) -> None:
    if run.have("clusters.npz"):
        return

    def go():
        c = balanced_kmeans(run.graph.attributes, run.cfg.k, seed=run.cfg.seed, normalize=run.cfg.kmeans_normalize)
        run.save_npz("clusters.npz", cluster_of=c.cluster_of, k=np.array(c.k), capacity=np.array(c.capacity))

    _timed(run, "clusters.npz", "cluster", go)


def _clusters(run: Run, stage: str) -> ClusterAssignment:
    d = run.load_npz("clusters.npz", stage)
    return ClusterAssignment(int(d["k"]), int(d["capacity"]), d["cluster_of"])


def cmd_train_gae(run: Run) -> None:
    if run.have("gae.ckpt"):
        return
    c = _clusters(run, "train-gae")

    def go():
        model = train_gae(run.graph, c, run.cfg.gae)
        save_gae(run.path("gae.ckpt"), model, {"config_hash": run.hash, "k": c.k})
        run.write_csv("gae_history.csv", ["epoch", "phase", "loss"], [(h["epoch"], h["phase"], h["loss"]) for h in model.history])

    _timed(run, "gae.ckpt", "train-gae", go)


def cmd_encode(run: Run) -> None:
    if run.have("latents.npz"):
        return
    run.need("gae.ckpt", "encode")

    def go():
        model = load_gae(run.path("gae.ckpt")).with_ema()
        z = encode_all(model.encoder, EncoderInputs.from_graph(run.graph, model.config.use_pos))
        run.save_npz("latents.npz", z=z)

    _timed(run, "latents.npz", "encode", go)


def cmd_train_ldm(run: Run) -> None:
    if run.have("ldm.ckpt"):
        return
    z = run.load_npz("latents.npz", "train-ldm")["z"]
    g = run.graph

    def go():
        train = g.nodes_in("train")
        model = train_ldm(z[train], g.labels[train], run.cfg.ldm, n_classes=g.n_classes)
        save_ldm(run.path("ldm.ckpt"), model, {"config_hash": run.hash})
        run.write_csv("ldm_history.csv", ["epoch", "loss"], [(h["epoch"], h["loss"]) for h in model.history])

    _timed(run, "ldm.ckpt", "train-ldm", go)


def cmd_generate(run: Run) -> None:
    if run.have("synthetic.npz"):
        return
    g = run.graph
    n_per_class = _n_per_class(run)

    def go():
        if n_per_class == 0:
            syn = SyntheticBatch.empty(run.cfg.gae.latent_dim, g.n_features)
        else:
            run.need("ldm.ckpt", "generate")
            run.need("gae.ckpt", "generate")
            ldm = load_ldm(run.path("ldm.ckpt"))
            gae = load_gae(run.path("gae.ckpt")).with_ema()
            c = _clusters(run, "generate")
            lat, lab = generate_synthetic_latents(ldm.ema_denoiser(), n_per_class, run.cfg.omega, ldm.schedule, run.cfg.seed)
            x, e = decode_synthetic_structures(gae.decoder, lat, c, run.cfg.threshold, run.cfg.max_degree)
            syn = SyntheticBatch(lat, lab, x, e)
        run.save_npz("synthetic.npz", latents=syn.latents, labels=syn.labels, attributes=syn.attributes, edges=syn.edges)
        with open(run.path("synthetic_edges.txt"), "w") as fh:
            fh.write(f"# config_hash={run.hash}\n")
            for s, o in syn.edges:
                fh.write(f"{g.n_nodes + int(s)} {int(o)}\n")

    _timed(run, "synthetic.npz", "generate", go)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _synthetic(run: Run, stage: str) -> SyntheticBatch:
    d = run.load_npz("synthetic.npz", stage)
    return SyntheticBatch(d["latents"], d["labels"], d["attributes"], d["edges"].reshape(-1, 2))


def cmd_assemble(run: Run) -> None:
    if run.have("augmented.npz"):
        return
    syn = _synthetic(run, "assemble")

    def go():
        aug = assemble_augmented_graph(run.graph, syn).graph
        run.save_npz("augmented.npz", attributes=aug.attributes, edges=aug.edges, labels=aug.labels, split=aug.split)
        paths = save_graph(aug, run.path("augmented"))
        checksums = {n: _sha256(run.path(n)) for n in ("gae.ckpt", "ldm.ckpt") if os.path.exists(run.path(n))}
        sidecar = {
            "config_hash": run.hash,
            "seed": run.cfg.seed,
            "omega": run.cfg.omega,
            "n_synthetic": syn.n_syn,
            "n_original": run.graph.n_nodes,
            "model_sha256": checksums,
            "files": {k: os.path.basename(v) for k, v in paths.items()},
        }
        run._write_json(os.path.join("augmented", "provenance.json"), sidecar)

    _timed(run, "augmented.npz", "assemble", go)


def _augmented(run: Run, stage: str) -> AttributedGraph:
    d = run.load_npz("augmented.npz", stage)
    return AttributedGraph(d["attributes"], d["edges"], d["labels"], d["split"])


def _seeds(run: Run):
    return [run.cfg.seed + i for i in range(run.cfg.n_eval_seeds)]


def _lowrank(run: Run):
    return LowRankConfig(run.cfg.tau, run.cfg.gamma, run.cfg.eta, run.cfg.tnn_features) if run.cfg.tau > 0 else None


def _train_variant(run: Run, g: AttributedGraph, tag: str, lr_cfg) -> None:
    for s in _seeds(run):
        name = f"gcn_{tag}_seed{s}.npz"
        if run.have(name):
            continue

        def go():
            res = train_node_classifier(g, lr_cfg, replace(run.cfg.gcn, seed=s), n_classes=run.graph.n_classes)
            m = res.model
            run.save_npz(name, w1=m.w1, w2=m.w2, w_cls=m.w_cls, row_normalize=np.array(m.row_normalize))
            run.write_csv(
                f"metrics_{tag}_seed{s}.csv",
                ["epoch", "train_loss", "tnn", "val_acc", "test_acc"],
                [(h["epoch"], h["train_loss"], h["tnn"], h["val_acc"], h["test_acc"]) for h in res.history],
            )

        _timed(run, name, "train-gnn", go)


def cmd_train_gnn(run: Run) -> None:
    _train_variant(run, _augmented(run, "train-gnn"), "augmented", _lowrank(run))
    if run.cfg.compare_baseline:
        _train_variant(run, run.graph, "baseline", None)


def _load_gcn(run: Run, name: str, stage: str) -> GcnModel:
    d = run.load_npz(name, stage)
    return GcnModel(d["w1"], d["w2"], d["w_cls"], bool(d.get("row_normalize", False)))


def _accuracy(model: GcnModel, g: AttributedGraph, split: str) -> float | None:
    idx = g.nodes_in(split)
    if len(idx) == 0:
        return None
    _, logits, _ = gcn_forward(model, g)
    return float(np.mean(np.argmax(logits[idx], 1) == g.labels[idx]))


def cmd_eval(run: Run) -> dict:
    variants = [("augmented", _augmented(run, "eval"))]
    if run.cfg.compare_baseline:
        variants.append(("baseline", run.graph))
    rows, summary = [], {"config_hash": run.hash, "seed": run.cfg.seed, "config": run.cfg.to_dict()}
    for tag, g in variants:
        accs = []
        for s in _seeds(run):
            m = _load_gcn(run, f"gcn_{tag}_seed{s}.npz", "eval")
            val, test = _accuracy(m, g, "val"), _accuracy(m, g, "test")
            rows.append((tag, s, val, test))
            if test is not None:
                accs.append(test)
        # a graph without test nodes still gets a summary entry, with null statistics
        mean, std = (float(np.mean(accs)), float(np.std(accs))) if accs else (None, None)
        summary[tag] = {"test_mean": mean, "test_std": std, "n_seeds": len(accs)}
    run.write_csv("eval.csv", ["variant", "seed", "val_acc", "test_acc"], rows)
    run._write_json("summary.json", summary)
    return summary


def cmd_diag(run: Run) -> np.ndarray:
    """Eigen-projection of training labels on the classifier's penultimate features."""
    g = _augmented(run, "diag")
    m = _load_gcn(run, f"gcn_augmented_seed{run.cfg.seed}.npz", "diag")
    h, _, _ = gcn_forward(m, g)
    spectrum = gram_matrix(h)
    y = one_hot_training_labels(g, run.graph.n_classes)
    p, curve = eigen_projection(spectrum, y)
    header = ["rank"] + [f"proj_c{c}" for c in range(p.shape[0])] + ["concentration"]
    run.write_csv("diag.csv", header, [[r + 1, *p[:, r], curve[r]] for r in range(len(curve))])
    return curve


def cmd_metrics(run: Run) -> dict:
    syn = _synthetic(run, "metrics")
    aug = assemble_augmented_graph(run.graph, syn)
    m = structure_metrics(aug)
    keys = ["original_homophily", "original_avg_degree", "synthetic_homophily", "synthetic_avg_degree"]
    run.write_csv("structure.csv", ["n_synthetic", *keys], [[syn.n_syn, *(m[k] for k in keys)]])
    return m


def cmd_cv(run: Run) -> dict:
    grids = run.cfg.cv_grids or {"gamma": [run.cfg.gamma], "tau": [run.cfg.tau], "beta": [run.cfg.beta_syn]}
    betas = list(grids.get("beta", [run.cfg.beta_syn]))
    if betas != [run.cfg.beta_syn]:
        raise StageError("the beta grid needs one pipeline run per beta; search tau and gamma here")
    aug = _augmented(run, "cv")
    res = cross_validate(
        run.graph,
        {"gamma": grids["gamma"], "tau": grids["tau"], "beta": betas},
        CvBudget(seed=run.cfg.seed),
        run.cfg.gcn,
        augment_for_beta=lambda beta: aug,
        tnn_features=run.cfg.tnn_features,
    )
    run.write_csv("cv.csv", ["beta", "tau", "gamma", "score"], [(*k, v) for k, v in sorted(res["scores"].items())])
    out = {k: res[k] for k in ("beta", "tau", "gamma", "score")}
    run._write_json("cv_selected.json", {"config_hash": run.hash, **out})
    return out


def cmd_pipeline(run: Run) -> dict:
    if _n_per_class(run) > 0:
        cmd_cluster(run)
        cmd_train_gae(run)
        cmd_encode(run)
        cmd_train_ldm(run)
    cmd_generate(run)
    cmd_assemble(run)
    cmd_train_gnn(run)
    summary = cmd_eval(run)
    cmd_metrics(run)
    cmd_diag(run)
    return summary


COMMANDS = {
    "cluster": cmd_cluster,
    "train-gae": cmd_train_gae,
    "encode": cmd_encode,
    "train-ldm": cmd_train_ldm,
    "generate": cmd_generate,
    "assemble": cmd_assemble,
    "train-gnn": cmd_train_gnn,
    "eval": cmd_eval,
    "diag": cmd_diag,
    "metrics": cmd_metrics,
    "cv": cmd_cv,
    "pipeline": cmd_pipeline,
}


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        with open(args.config) as fh:
            cfg = RunConfig.from_dict(json.load(fh))
    if args.desk:
        cfg = desk_preset(cfg)
    over = {}
    for name in ("data", "out_dir", "omega", "seed", "max_degree", "beta_syn", "tau", "gamma", "tnn_features", "k", "n_eval_seeds"):
        v = getattr(args, name)
        if v is not None:
            over[name] = v
    cfg = replace(cfg, **over)
    if args.t_max is not None:
        cfg = replace(cfg, ldm=replace(cfg.ldm, t_max=args.t_max))
    return cfg


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dog", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--desk", action="store_true", help="short CPU schedules")
    p.add_argument("--data", help="graph directory, 'cora', or synthetic:<name>")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--run-dir", help="explicit run directory (default: <out-dir>/run-<hash>)")
    p.add_argument("--omega", type=float)
    p.add_argument("--t-max", dest="t_max", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-degree", dest="max_degree", type=int)
    p.add_argument("--beta-syn", dest="beta_syn", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--tnn-features", dest="tnn_features", choices=("train", "eval"), help="H seen by the low-rank penalty")
    p.add_argument("--k", type=int)
    p.add_argument("--n-eval-seeds", dest="n_eval_seeds", type=int)
    p.add_argument("--force", action="store_true", help="accept artifacts from another config hash")
    p.add_argument("--print-config", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    cfg = build_config(args)
    if args.print_config:
        print(json.dumps(cfg.resolved().to_dict(), indent=2, sort_keys=True))
        return 0
    threads = os.environ.get(THREADS_ENV)
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                result = _dispatch(args, cfg)
        else:
            result = _dispatch(args, cfg)
    except (StageError, ValueError, FloatingPointError) as exc:
        print(f"dog {args.command}: error: {exc}", file=sys.stderr)
        return 2
    if isinstance(result, dict):
        print(json.dumps({k: v for k, v in result.items() if k != "config"}, indent=2, sort_keys=True, default=str))
    return 0


def _dispatch(args, cfg):
    run = Run(cfg, args.run_dir, args.force)
    print(f"run directory: {run.dir}", file=sys.stderr)
    return COMMANDS[args.command](run)
