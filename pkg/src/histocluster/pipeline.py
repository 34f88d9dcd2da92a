"""End-to-end run: tile -> qc -> train -> assign -> survive -> interpret -> report.

Every stage writes its outputs into the run directory plus a stamp file
``stages/<stage>.json`` recording the config digest, the stage seed, the
digests of its outputs and of the upstream stamps it consumed.  A stage
whose stamp is intact is skipped, so deleting one output reruns only that
stage and whatever depends on it.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, dcec, interpretation, qc, report, survival, tiling
from .config import RunConfig, stage_seed

log = logging.getLogger(__name__)

STAGES = ["tile", "qc", "train", "assign", "survive", "interpret", "report"]
UPSTREAM = {
    "tile": [],
    "qc": ["tile"],
    "train": ["qc"],
    "assign": ["train"],
    "survive": ["assign"],
    "interpret": ["assign", "survive"],
    "report": ["survive", "interpret"],
}


class PipelineError(RuntimeError):
    def __init__(self, stage, message, slide=None):
        self.stage = stage
        self.slide = slide
        where = f" slide {slide!r}:" if slide else ""
        super().__init__(f"[{stage}]{where} {message}")


class ConfigMismatchError(PipelineError):
    pass


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class SlideEntry:
    slide_id: str
    image: Path
    annotation: Path | None
    time_months: float
    event: bool


def read_manifest(path):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        head = fh.readline()
        fh.seek(0)
        rows = list(csv.DictReader(fh, delimiter="\t" if "\t" in head else ","))
    base = path.parent
    entries, seen = [], set()
    for r in rows:
        sid = r["slide_id"].strip()
        if sid in seen:
            raise PipelineError("manifest", "duplicate slide id", sid)
        seen.add(sid)
        ann = (r.get("annotation") or "").strip()
        entries.append(SlideEntry(
            sid,
            (base / r["image"].strip()).resolve(),
            (base / ann).resolve() if ann else None,
            float(r["time_months"]),
            bool(int(r["event"])),
        ))
    return entries


def validate_manifest(entries):
    for e in entries:
        if not e.image.is_file():
            raise PipelineError("manifest", f"image file not found: {e.image}", e.slide_id)
        if e.annotation is not None and not e.annotation.is_file():
            raise PipelineError("manifest", f"annotation file not found: {e.annotation}", e.slide_id)
        if e.time_months <= 0:
            raise PipelineError("manifest", "time_months must be > 0", e.slide_id)


def manifest_digest(entries):
    h = hashlib.sha256()
    for e in entries:
        h.update(f"{e.slide_id}\t{e.time_months!r}\t{int(e.event)}\n".encode())
        h.update(_file_digest(e.image).encode())
        if e.annotation is not None:
            h.update(_file_digest(e.annotation).encode())
    return h.hexdigest()[:16]


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# stage bookkeeping


class Run:
    def __init__(self, manifest, cfg: RunConfig, out_dir):
        self.manifest_path = Path(manifest)
        self.cfg = cfg
        self.out = Path(out_dir)
        self.entries = read_manifest(self.manifest_path)
        validate_manifest(self.entries)
        self.run_digest = hashlib.sha256(
            (cfg.digest() + manifest_digest(self.entries)).encode()).hexdigest()[:16]
        self.executed = []

    # paths
    def path(self, name):
        return self.out / name

    def _stamp_path(self, stage):
        return self.out / "stages" / f"{stage}.json"

    def read_stamp(self, stage):
        p = self._stamp_path(stage)
        if not p.is_file():
            return None
        return json.loads(p.read_text())

    def stamp_digest(self, stage):
        p = self._stamp_path(stage)
        return _file_digest(p) if p.is_file() else None

    def is_current(self, stage):
        stamp = self.read_stamp(stage)
        if stamp is None or stamp["config_hash"] != self.run_digest:
            return False
        for name, digest in stamp["outputs"].items():
            p = self.path(name)
            if not p.is_file() or _file_digest(p) != digest:
                return False
        return all(stamp["inputs"].get(up) == self.stamp_digest(up) for up in UPSTREAM[stage])

    def check_upstream(self, stage):
        for up in UPSTREAM[stage]:
            stamp = self.read_stamp(up)
            if stamp is None:
                raise PipelineError(stage, f"upstream stage '{up}' has not been run")
            if stamp["config_hash"] != self.run_digest:
                raise ConfigMismatchError(
                    stage, f"upstream stage '{up}' was produced with config {stamp['config_hash']}, "
                           f"this run is {self.run_digest}")
            if not self.is_current(up):
                raise PipelineError(stage, f"outputs of upstream stage '{up}' are missing or modified")

    def write_stamp(self, stage, outputs):
        stamp = {
            "stage": stage,
            "config_hash": self.run_digest,
            "seed": stage_seed(self.cfg.seed, stage),
            "outputs": {name: _file_digest(self.path(name)) for name in sorted(outputs)},
            "inputs": {up: self.stamp_digest(up) for up in UPSTREAM[stage]},
        }
        p = self._stamp_path(stage)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")

    def stamp_header(self, stage):
        return f"# config={self.run_digest} seed={stage_seed(self.cfg.seed, stage)} stage={stage}"


def _write_tsv(path, header, rows, stamp=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if stamp:
            fh.write(stamp + "\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_tsv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines, delimiter="\t"))


# ---------------------------------------------------------------------------
# stages


def _load_tiles(run, refs):
    """Pixel data for ``refs`` (grouped by slide to read each image once)."""
    by_slide = {}
    for i, r in enumerate(refs):
        by_slide.setdefault(r.slide_id, []).append(i)
    entries = {e.slide_id: e for e in run.entries}
    out = [None] * len(refs)
    for sid, idx in by_slide.items():
        img = tiling.load_raster(entries[sid].image)
        for i in idx:
            out[i] = tiling.extract_tile(img, refs[i])
    return out


def _read_tiles(run):
    rows = _read_tsv(run.path("tiles.tsv"))
    return [tiling.TileRef(r["slide_id"], int(r["row"]), int(r["col"]), int(r["x"]), int(r["y"]),
                           int(r["size"])) for r in rows]


def stage_tile(run):
    cfg = run.cfg
    tiles = []
    (run.out / "masks").mkdir(parents=True, exist_ok=True)
    outputs = ["tiles.tsv"]
    for e in run.entries:
        try:
            img = tiling.load_raster(e.image)
            annot = tiling.load_raster(e.annotation) if e.annotation else None
            thumb, mask = tiling.tissue_mask(img, cfg.scale, cfg.min_component)
            eroded = tiling.erode_mask(mask)
            if annot is not None:
                annot = tiling.reduce_annotation(annot, mask.shape, cfg.scale)
            slide_tiles = tiling.enumerate_tiles(eroded, annot, e.slide_id, cfg.scale, cfg.tile_size,
                                                 img.shape[:2])
        except (tiling.InvalidInputError, OSError) as exc:
            raise PipelineError("tile", str(exc), e.slide_id) from exc
        if not slide_tiles:
            log.warning("slide %s produced no tiles", e.slide_id)
        tiles.extend(slide_tiles)
        mask_name = f"masks/{e.slide_id}.png"
        tiling.save_raster(run.path(mask_name), np.where(eroded, 255, np.where(mask, 128, 0)))
        outputs.append(mask_name)
    _write_tsv(run.path("tiles.tsv"), tiling.TILE_FIELDS,
               [[t.slide_id, t.row, t.col, t.x, t.y, t.size] for t in sorted(tiles)],
               run.stamp_header("tile"))
    return outputs


def stage_qc(run):
    cfg = run.cfg
    refs = _read_tiles(run)
    if len(refs) < 2:
        raise PipelineError("qc", f"only {len(refs)} tiles available")
    images = _load_tiles(run, refs)
    seed = stage_seed(cfg.seed, "qc")
    train_idx = dcec.subsample(len(refs), cfg.qc_train_cap, seed)
    dataset = qc.make_blur_dataset([images[i] for i in train_idx], seed)
    qcfg = qc.QcConfig(**{**vars(cfg.qc), "seed": seed})
    try:
        model = qc.train_blur_regressor(dataset, qcfg)
    except qc.TrainingError as exc:
        raise PipelineError("qc", str(exc)) from exc
    verdicts = qc.score_and_filter(refs, images, model, cfg.qc_threshold)
    _write_tsv(run.path("qc.tsv"), qc.QC_FIELDS,
               [[v.tile_ref.slide_id, v.tile_ref.row, v.tile_ref.col, f"{v.score:.6f}", int(v.keep)]
                for v in sorted(verdicts, key=lambda v: v.tile_ref)],
               run.stamp_header("qc"))
    checkpoint.save(run.path("qc_model.ckpt"), model.store,
                    meta={"widths": list(qcfg.widths), "hidden": qcfg.hidden,
                          "losses": model.losses, "config_hash": run.run_digest})
    return ["qc.tsv", "qc_model.ckpt"]


def _kept_tiles(run):
    refs = {(t.slide_id, t.row, t.col): t for t in _read_tiles(run)}
    kept = []
    for r in _read_tsv(run.path("qc.tsv")):
        if r["keep"] == "1":
            kept.append(refs[(r["slide_id"], int(r["row"]), int(r["col"]))])
    return sorted(kept)


def _tensor(run, refs):
    return qc.to_tensor(_load_tiles(run, refs))


def _train_config(run):
    return dcec.TrainConfig(**{**vars(run.cfg.train), "seed": stage_seed(run.cfg.seed, "train")})


def stage_train(run):
    kept = _kept_tiles(run)
    tcfg = _train_config(run)
    if len(kept) < tcfg.k:
        raise PipelineError("train", f"{len(kept)} tiles passed QC, fewer than k={tcfg.k}")
    idx = dcec.subsample(len(kept), tcfg.sample_cap, tcfg.seed)
    sample = [kept[i] for i in idx]
    x = _tensor(run, sample)
    try:
        result = dcec.train(x, tcfg)
    except (dcec.TrainingError, FloatingPointError) as exc:
        raise PipelineError("train", str(exc)) from exc
    meta = {
        "epoch": tcfg.epochs,
        "config": run.cfg.to_dict(),
        "config_hash": run.run_digest,
        "in_channels": int(x.shape[1]),
        "tile_size": int(x.shape[2]),
    }
    checkpoint.save(run.path("model.ckpt"), result.model.store,
                    extra={"centroids": result.centroids.centers,
                           "assignment": result.labels.astype(np.int32),
                           "empty": result.centroids.empty.astype(np.int32)},
                    meta=meta)
    _write_tsv(run.path("train_trace.tsv"), ["epoch", "lr", "loss", "recon", "cluster", "n_empty"],
               [[s["epoch"], f"{s['lr']:.6g}", f"{s['loss']:.8f}", f"{s['recon']:.8f}",
                 f"{s['cluster']:.8f}", s["n_empty"]] for s in result.trace],
               run.stamp_header("train"))
    return ["model.ckpt", "train_trace.tsv"]


def load_model(path):
    store, extra, meta = checkpoint.load(path)
    cfg = RunConfig.from_dict(meta["config"])
    t = cfg.train
    model = dcec.build_autoencoder(meta["in_channels"], meta["tile_size"], t.widths,
                                   t.blocks_per_stage, t.decoder_layers)
    model.store = store
    centroids = dcec.CentroidSet(extra["centroids"], meta["epoch"], extra["empty"].astype(bool))
    return model, centroids, meta


def stage_assign(run):
    model, centroids, _ = load_model(run.path("model.ckpt"))
    kept = _kept_tiles(run)
    labels = []
    # embed slide by slide to bound memory
    for sid in sorted({t.slide_id for t in kept}):
        refs = [t for t in kept if t.slide_id == sid]
        z = dcec.embed(model, _tensor(run, refs))
        labels.extend(zip(refs, dcec.assign_clusters(z, centroids).tolist()))
    _write_tsv(run.path("clusters.tsv"), ["slide_id", "row", "col", "cluster"],
               [[t.slide_id, t.row, t.col, c] for t, c in sorted(labels)],
               run.stamp_header("assign"))
    return ["clusters.tsv"]


def _read_clusters(run):
    return [(r["slide_id"], int(r["row"]), int(r["col"]), int(r["cluster"]))
            for r in _read_tsv(run.path("clusters.tsv"))]


def stage_survive(run):
    cfg = run.cfg
    k = cfg.train.k
    ids = [e.slide_id for e in run.entries]
    time = np.array([e.time_months for e in run.entries])
    event = np.array([e.event for e in run.entries])
    rows = _read_clusters(run)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        x = survival.binarize_presence([(s, c) for s, _, _, c in rows], ids, k)
    notes = [str(w.message) for w in caught]
    names = [str(j) for j in range(k)]
    try:
        sweep = survival.univariate_sweep(time, event, x, names, cfg.alpha, cfg.ties)
    except survival.NoEventsError as exc:
        raise PipelineError("survive", str(exc)) from exc
    combos = {}
    if len(sweep.significant) >= 2:
        combos = survival.multivariate_combinations(time, event, x, names, sweep.significant, cfg.ties)
    elif sweep.significant:
        notes.append("only one significant cluster: no multivariate combinations")
    else:
        notes.append("no clusters were significant in univariate analysis")
    full = None
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            full, dropped = survival.all_covariates_fit(time, event, x, names, cfg.ties)
        notes += [str(w.message) for w in caught]
        if dropped:
            notes.append(f"all-cluster model dropped constant/collinear clusters: {', '.join(dropped)}")
    except survival.SurvivalDataError as exc:
        notes.append(f"all-cluster model not fitted: {exc}")

    curves, logrank = {}, {}
    km_targets = sweep.significant or [n for n in names if n in sweep.fits]
    for name in km_targets:
        grp = x[:, int(name)].astype(bool)
        curves[name] = {"positive": survival.km_estimate(time, event, grp),
                        "negative": survival.km_estimate(time, event, ~grp)}
        stat, p, df = survival.logrank_test(time, event, grp)
        logrank[name] = {"chi2": stat, "p": p, "df": df}

    payload = {
        "config_hash": run.run_digest,
        "seed": stage_seed(cfg.seed, "survive"),
        "slides": ids,
        "covariates": x.tolist(),
        "univariate": {n: survival.fit_to_dict(f) for n, f in sweep.fits.items()},
        "skipped": sweep.skipped,
        "significant": sweep.significant,
        "combinations": [{"clusters": list(c), "fit": survival.fit_to_dict(f)} for c, f in combos.items()],
        "all_clusters": survival.fit_to_dict(full) if full is not None else None,
        "logrank": logrank,
        "km_clusters": km_targets,
        "notes": notes,
    }
    run.path("survival.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    km_rows = []
    for name, groups in curves.items():
        for g, c in groups.items():
            for i in range(len(c.times)):
                km_rows.append([name, g, f"{c.times[i]:.10g}", f"{c.survival[i]:.12f}",
                                int(c.at_risk[i]), int(c.events[i]), int(c.censored[i])])
    _write_tsv(run.path("km.tsv"), ["cluster"] + report.KM_FIELDS, km_rows, run.stamp_header("survive"))
    return ["survival.json", "km.tsv"]


def read_km(path):
    curves = {}
    for r in _read_tsv(path):
        curves.setdefault(r["cluster"], {}).setdefault(r["group"], []).append(r)
    out = {}
    for cluster, groups in curves.items():
        out[cluster] = {}
        for g, rows in groups.items():
            out[cluster][g] = survival.KMCurve(
                np.array([float(r["time"]) for r in rows]),
                np.array([float(r["survival"]) for r in rows]),
                np.array([int(r["at_risk"]) for r in rows]),
                np.array([int(r["events"]) for r in rows]),
                np.array([int(r["censored"]) for r in rows]),
            )
    return out


def stage_interpret(run):
    cfg = run.cfg
    surv = json.loads(run.path("survival.json").read_text())
    rows = _read_clusters(run)
    assignments = [(tiling.TileRef(s, r, c, c * cfg.scale, r * cfg.scale, cfg.tile_size), k)
                   for s, r, c, k in rows]
    targets = surv["significant"] or sorted({k for *_, k in rows})
    seed = stage_seed(cfg.seed, "interpret")
    samples, notes = {}, []
    for cluster in (int(t) for t in targets):
        try:
            samples[cluster] = interpretation.sample_cluster_tiles(
                assignments, cluster, cfg.sample_per_cluster, seed)
        except interpretation.ProtocolError as exc:
            notes.append(str(exc))
    report.write_montage_index(run.path("samples.tsv"), samples)
    outputs = ["samples.tsv"]
    labels = []
    if cfg.annotations:
        try:
            annotated = interpretation.read_annotations(cfg.annotations)
            for cluster, anns in sorted(annotated.items()):
                labels.append(interpretation.classify_features(anns, cluster, cfg.sample_per_cluster))
        except (interpretation.ProtocolError, OSError) as exc:
            raise PipelineError("interpret", str(exc)) from exc
    interpretation.write_labels(run.path("labels.json"), labels)
    outputs.append("labels.json")
    run.path("interpret_notes.txt").write_text("".join(n + "\n" for n in notes))
    outputs.append("interpret_notes.txt")
    return outputs


def stage_report(run):
    cfg = run.cfg
    surv = json.loads(run.path("survival.json").read_text())
    uni = {n: survival.fit_from_dict(d) for n, d in surv["univariate"].items()}
    combos = {tuple(c["clusters"]): survival.fit_from_dict(c["fit"]) for c in surv["combinations"]}
    sig = surv["significant"]
    (run.out / "report").mkdir(parents=True, exist_ok=True)
    outputs = []

    lines = [f"# Survival report", "", f"config {run.run_digest}, seed {cfg.seed}", ""]
    if sig:
        lines += [f"Significant clusters (univariate Wald p < {cfg.alpha}): {', '.join(sig)}", ""]
        lines.append(report.hazard_table(uni, combos, sig, cfg.stars))
    else:
        lines += ["No clusters were significant in univariate analysis.", ""]
    if surv["all_clusters"] is not None:
        lines.append(report.model_summary(survival.fit_from_dict(surv["all_clusters"]), cfg.stars,
                                          "All-cluster multivariate model"))
    lines.append("## Univariate fits\n")
    lines.append("| cluster | HR (95% CI) | Wald p | log-rank p |")
    lines.append("|---|---|---|---|")
    for n, f in uni.items():
        lr = surv["logrank"].get(n)
        lines.append(f"| {n} | {report.format_hr(f.hr[0], f.ci_low[0], f.ci_high[0], f.p[0], cfg.stars)} | "
                     f"{f.p[0]:.4g} | {'' if lr is None else format(lr['p'], '.4g')} |")
    if surv["notes"]:
        lines += ["", "## Notes", ""] + [f"- {n}" for n in surv["notes"]]
    run.path("report/report.md").write_text("\n".join(lines) + "\n")
    outputs.append("report/report.md")

    km = read_km(run.path("km.tsv"))
    for name in sig:
        fname = f"report/km_cluster_{name}.svg"
        report.plot_km(run.path(fname), km[name], f"Cluster {name}", surv["logrank"][name]["p"])
        outputs.append(fname)

    samples = {}
    for r in _read_tsv(run.path("samples.tsv")):
        samples.setdefault(int(r["cluster"]), []).append(
            tiling.TileRef(r["slide_id"], int(r["row"]), int(r["col"]), int(r["x"]), int(r["y"]), int(r["size"])))
    report.write_montage_index(run.path("report/montage.tsv"), samples)
    outputs.append("report/montage.tsv")
    if samples:
        clusters = sorted(samples)
        flat = [t for c in clusters for t in samples[c]]
        pix = _load_tiles(run, flat)
        rows, pos = [], 0
        for c in clusters:
            rows.append(pix[pos:pos + len(samples[c])])
            pos += len(samples[c])
        tiling.save_raster(run.path("report/montage.png"), report.montage_image(rows))
        outputs.append("report/montage.png")
    return outputs


STAGE_FUNCS = {
    "tile": stage_tile,
    "qc": stage_qc,
    "train": stage_train,
    "assign": stage_assign,
    "survive": stage_survive,
    "interpret": stage_interpret,
    "report": stage_report,
}


def run_stage(run, stage, force=False):
    if not force and run.is_current(stage):
        log.info("stage %s is up to date", stage)
        return False
    run.check_upstream(stage)
    log.info("running stage %s", stage)
    run.out.mkdir(parents=True, exist_ok=True)
    try:
        outputs = STAGE_FUNCS[stage](run)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc
    run.write_stamp(stage, outputs)
    run.executed.append(stage)
    return True


def run_pipeline(manifest, cfg, out_dir, stages=None, force=False):
    """Run (or resume) the requested stages in order; returns the :class:`Run`."""
    run = Run(manifest, cfg, out_dir)
    run.out.mkdir(parents=True, exist_ok=True)
    cfg_path = run.path("config.json")
    if cfg_path.is_file() and not force:
        old = json.loads(cfg_path.read_text())
        if old.get("run_digest") != run.run_digest:
            raise ConfigMismatchError(
                "run", f"{out_dir} holds a run with config {old.get('run_digest')}; "
                       f"this run is {run.run_digest} (use a new directory or --force)")
    cfg_path.write_text(json.dumps({"run_digest": run.run_digest, "config": cfg.to_dict(),
                                    "manifest": os.fspath(run.manifest_path)}, indent=2, sort_keys=True) + "\n")
    for stage in stages or STAGES:
        run_stage(run, stage, force)
    return run
