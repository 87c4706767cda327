"""Task execution: wires configs to the training, sampling, translation and
evaluation pipelines and lays out run artifacts.

Every run writes a frozen copy of its effective configuration first, then
task artifacts (logs, checkpoints, sample grids, reports). Failures leave a
failure record next to whatever partial artifacts exist. Final artifacts are
written atomically (temp file + rename); training logs are append-only.
"""

from __future__ import annotations

import os
import tempfile
import traceback
from dataclasses import dataclass

import numpy as np
import torch

from . import biometric, cycle, data, diffusion, gan, metrics, networks, schedules
from .config import RunConfig
from .errors import ConfigurationError

FIG2_EPOCHS = (1, 50, 100, 150, 200, 400, 800, 1000)


def _atomic_write(path, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


@dataclass
class RunResult:
    status: str
    out_dir: str
    artifacts: list[str]


def _list_artifacts(out_dir: str) -> list[str]:
    found = []
    for root, _, files in os.walk(out_dir):
        for name in files:
            found.append(os.path.relpath(os.path.join(root, name), out_dir))
    return sorted(found)


def _ridge_params(cfg: RunConfig) -> data.RidgeParams:
    d = cfg.values["data"]
    return data.RidgeParams(
        frequency=d["frequency"],
        orientation_scale=d["orientation_scale"],
        n_singularities=d["n_singularities"],
        noise_level=d["noise_level"],
        contrast=d["contrast"],
    )


def _load_dataset(cfg: RunConfig, key: str = "dataset", seed_offset: int = 0,
                  condition: str | None = None, corrupt: bool = False) -> data.PatchDataset:
    source = cfg.values["data"][key]
    d = cfg.values["data"]
    if source == "synthetic":
        ds = data.synth_ridge_dataset(
            d["n"], d["pad_to"], _ridge_params(cfg), seed=cfg.seed + seed_offset,
            n_fingers=d["n_fingers"], condition=condition or d["condition"],
        )
        if corrupt or d["spoof_corruption"]:
            ds.images = data.apply_spoof_corruption(ds.images, seed=cfg.seed + seed_offset + 77)
        return ds
    ds = data.load_image_dataset(source, pad_to=d["pad_to"])
    if len(ds) == 0:
        raise ConfigurationError(f"[data] {key}: no images under {source}")
    return ds


def _schedule(cfg: RunConfig) -> schedules.NoiseSchedule:
    s = cfg.values["schedule"]
    if s["kind"] == "linear":
        return schedules.make_linear_schedule(s["time_steps"], s["noise_min"], s["noise_max"])
    return schedules.make_cosine_schedule(s["time_steps"], s["cosine_offset"])


def _denoiser_spec(cfg: RunConfig) -> networks.DenoiserSpec:
    m = cfg.values["model"]
    return networks.DenoiserSpec(
        variant=m["variant"],
        input_size=m["image_size"],
        channels=m["channels"],
        time_embed_dim=m["time_embed_dim"],
        blocks_per_level=m["blocks_per_level"],
        groups=m["groups"],
    )


def _checkpoint_epochs(total: int, every: int) -> set[int]:
    marks = {e for e in range(every, total + 1, every)}
    marks |= {e for e in FIG2_EPOCHS if e <= total}
    marks.add(total)
    return marks


class _EpochLog:
    """Append-only training log with a fixed header."""

    def __init__(self, path: str, columns: tuple[str, ...]):
        os.makedirs(os.path.dirname(path), exist_ok=True)
        self.path = path
        self.columns = columns
        with open(path, "w", encoding="utf-8") as f:
            f.write("\t".join(columns) + "\n")

    def append(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write("\t".join(f"{record[c]:.8g}" if isinstance(record[c], float) else str(record[c]) for c in self.columns) + "\n")


def _task_train_ddpm(cfg: RunConfig, out: str) -> None:
    ds = _load_dataset(cfg)
    sched = _schedule(cfg)
    _atomic_write(os.path.join(out, "schedule.tsv"), sched.to_table())
    model = networks.build_denoiser(_denoiser_spec(cfg), seed=cfg.seed)
    t = cfg.values["train"]
    loss_cfg = diffusion.DiffusionLossConfig(t["loss"] if t["loss"] != "wasserstein" else "mse", t["huber_delta"])
    train_cfg = diffusion.DiffusionTrainConfig(t["batch_size"], t["learning_rate"], t["epochs"], loss_cfg)
    aug = None
    if t["augment"]:
        aug_cfg = data.AugmentConfig(ops=t["augment"])
        aug = lambda batch, gen: data.augment_batch(batch, aug_cfg, gen)
    log = _EpochLog(os.path.join(out, "train_log.tsv"), ("epoch", "loss"))
    marks = _checkpoint_epochs(t["epochs"], t["checkpoint_every"])

    def on_epoch(epoch: int, record: dict) -> None:
        log.append(record)
        if epoch in marks:
            model.time_steps = sched.T
            networks.save_denoiser(os.path.join(out, "checkpoints", f"denoiser_epoch{epoch:05d}.fsck"), model)
            grid = diffusion.sample_loop(model, sched, (16, 1, ds.size, ds.size), seed=cfg.seed + epoch)
            data.save_png_grid(grid, os.path.join(out, "samples", f"grid_epoch{epoch:05d}.png"), ncols=4)

    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(out, "samples"), exist_ok=True)
    diffusion.train_ddpm(ds.to_tensor(), model, sched, train_cfg, seed=cfg.seed, augment=aug, on_epoch=on_epoch)
    networks.save_denoiser(os.path.join(out, "checkpoints", "denoiser_final.fsck"), model)


def _task_train_wgan(cfg: RunConfig, out: str) -> None:
    ds = _load_dataset(cfg)
    g_cfg = cfg.values["gan"]
    t = cfg.values["train"]
    G = gan.build_generator(g_cfg["latent_dim"], ds.size, g_cfg["gen_base"], seed=cfg.seed)
    D = gan.build_critic(g_cfg["critic_base"], seed=cfg.seed + 1)
    loss_cfg = gan.GanLossConfig(g_cfg["lambda_gp"], g_cfg["n_critic"], t["learning_rate"], g_cfg["beta1"])
    log = _EpochLog(os.path.join(out, "train_log.tsv"), ("epoch", "critic_loss", "generator_loss", "penalty_mean"))
    marks = _checkpoint_epochs(t["epochs"], t["checkpoint_every"])
    eval_z = torch.randn(16, g_cfg["latent_dim"], generator=torch.Generator().manual_seed(cfg.seed))
    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(out, "samples"), exist_ok=True)

    def on_epoch(epoch: int, record: dict, handles: dict) -> None:
        log.append(record)
        if epoch in marks:
            gan.save_wgan(
                os.path.join(out, "checkpoints", f"wgan_epoch{epoch:05d}.fsck"),
                handles["G"], handles["D"], handles["opt_g"], handles["opt_d"], epoch=epoch,
            )
            with torch.no_grad():
                data.save_png_grid(handles["G"](eval_z), os.path.join(out, "samples", f"grid_epoch{epoch:05d}.png"), ncols=4)

    gan.train_wgan_gp(ds.to_tensor(), G, D, loss_cfg, epochs=t["epochs"], seed=cfg.seed,
                      batch_size=t["batch_size"], on_epoch=on_epoch)
    gan.save_wgan(os.path.join(out, "checkpoints", "wgan_final.fsck"), G, D, epoch=t["epochs"])


def _task_train_cycle(cfg: RunConfig, out: str) -> None:
    if cfg.values["data"]["dataset"] == "synthetic":
        domain_a = _load_dataset(cfg, seed_offset=0, condition="live")
        if cfg.values["data"]["dataset_b"] is None:
            domain_b = _load_dataset(cfg, seed_offset=1, condition="spoof_material_1", corrupt=True)
        else:
            domain_b = _load_dataset(cfg, key="dataset_b")
    else:
        domain_a = _load_dataset(cfg)
        domain_b = _load_dataset(cfg, key="dataset_b")
    c = cfg.values["cycle"]
    t = cfg.values["train"]
    loss_cfg = cycle.CycleLossConfig(
        lambda_cycle=c["lambda_cycle"], lambda_identity=c["lambda_identity"], lambda_gp=c["lambda_gp"],
        learning_rate=t["learning_rate"], beta1=c["beta1"], batch_size=t["batch_size"],
        epochs_constant=c["epochs_constant"], epochs_decay=c["epochs_decay"], n_critic=c["n_critic"],
    )
    total_epochs = c["epochs_constant"] + c["epochs_decay"]
    log = _EpochLog(os.path.join(out, "train_log.tsv"),
                    ("epoch", "lr", "adv_a", "adv_b", "cycle", "identity", "generator_total"))
    marks = _checkpoint_epochs(total_epochs, t["checkpoint_every"])
    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(out, "samples"), exist_ok=True)
    probe = domain_a.to_tensor()[: min(8, len(domain_a))]

    def on_epoch(epoch: int, record: dict, models: cycle.CycleModelSet) -> None:
        log.append(record)
        if epoch in marks:
            cycle.save_cycle_set(os.path.join(out, "checkpoints", f"cycle_epoch{epoch:05d}.fsck"),
                                 models, loss_cfg, epoch=epoch)
            translated = cycle.translate(models.g_ab, probe)
            pairs = torch.cat([probe, translated], dim=3)  # input | translated, side by side
            data.save_png_grid(pairs, os.path.join(out, "samples", f"pairs_epoch{epoch:05d}.png"), ncols=2)

    models, _ = cycle.train_cycle_wgan_gp(
        domain_a.to_tensor(), domain_b.to_tensor(), loss_cfg, seed=cfg.seed,
        base=c["base"], n_blocks=c["n_blocks"], critic_base=c["critic_base"], on_epoch=on_epoch,
    )
    cycle.save_cycle_set(os.path.join(out, "checkpoints", "cycle_final.fsck"), models, loss_cfg, epoch=total_epochs)


def _task_sample(cfg: RunConfig, out: str) -> None:
    s = cfg.values["sample"]
    model = networks.load_denoiser(s["checkpoint"])
    sched = _schedule(cfg)
    os.makedirs(os.path.join(out, "samples"), exist_ok=True)
    produced = []
    remaining, batch_idx = s["n"], 0
    while remaining > 0:
        b = min(s["batch"], remaining)
        batch = diffusion.sample_loop(model, sched, (b, 1, model.input_size, model.input_size),
                                      seed=cfg.seed * 100_003 + batch_idx)
        produced.append(batch)
        remaining -= b
        batch_idx += 1
    all_samples = torch.cat(produced)
    for i in range(all_samples.shape[0]):
        data.save_png(all_samples[i].numpy(), os.path.join(out, "samples", f"sample_{i:05d}.png"))
    data.save_png_grid(all_samples[: min(64, len(all_samples))], os.path.join(out, "samples", "grid.png"),
                       ncols=s["grid_cols"])


def _task_translate(cfg: RunConfig, out: str) -> None:
    models, _ = cycle.load_cycle_set(cfg.values["translate"]["checkpoint"])
    G = models.g_ab if cfg.values["translate"]["direction"] == "ab" else models.g_ba
    ds = _load_dataset(cfg)
    images = ds.to_tensor()
    translated = cycle.translate(G, images)
    os.makedirs(os.path.join(out, "translated"), exist_ok=True)
    for i in range(len(ds)):
        pair = torch.cat([images[i], translated[i]], dim=2)  # (1, H, 2W)
        data.save_png(translated[i].numpy(), os.path.join(out, "translated", f"translated_{i:05d}.png"))
        data.save_png(pair.numpy(), os.path.join(out, "translated", f"pair_{i:05d}.png"))
    data.save_png_grid(torch.cat([images, translated], dim=3), os.path.join(out, "translated", "pairs_grid.png"),
                       ncols=2)


def _fit_extractor(cfg: RunConfig, reference: data.PatchDataset):
    e = cfg.values["evaluate"]
    if e["extractor"] == "pixel_pca":
        comps = min(e["n_components"], len(reference) - 1, reference.size * reference.size)
        return metrics.PixelPCAExtractor(comps).fit(reference.images)
    if e["extractor"] == "small_cnn":
        return metrics.SmallCnnExtractor().fit(reference.images, seed=cfg.seed)
    return metrics.InceptionExtractor()


def _task_evaluate(cfg: RunConfig, out: str) -> None:
    ref = _load_dataset(cfg)
    cand = _load_dataset(cfg, key="dataset_b")
    extractor = _fit_extractor(cfg, ref)
    fs_a = metrics.extract_features(extractor, ref.images, source_id=str(cfg.values["data"]["dataset"]))
    fs_b = metrics.extract_features(extractor, cand.images, source_id=str(cfg.values["data"]["dataset_b"]))
    e = cfg.values["evaluate"]
    subset = min(e["kid_subset_size"], fs_a.n, fs_b.n)
    report = metrics.evaluate_feature_sets(fs_a, fs_b, k=e["k"], kid_subset_size=subset,
                                           kid_subsets=e["kid_subsets"], seed=cfg.seed)
    os.makedirs(os.path.join(out, "reports"), exist_ok=True)
    metrics.save_featureset(os.path.join(out, "reports", "features_a.fsfs"), fs_a)
    metrics.save_featureset(os.path.join(out, "reports", "features_b.fsfs"), fs_b)
    _atomic_write(os.path.join(out, "reports", "metrics.tsv"), report.to_text())


def _task_far_analysis(cfg: RunConfig, out: str) -> None:
    base = _load_dataset(cfg)
    f = cfg.values["far"]
    synth_dir = f["synthetic_dataset"]
    synth = data.load_image_dataset(synth_dir, pad_to=cfg.values["data"]["pad_to"])
    if len(synth) == 0:
        raise ConfigurationError(f"[far] synthetic_dataset: no images under {synth_dir}")
    angles = tuple(float(a) for a in np.arange(-f["max_rotation"], f["max_rotation"] + 1e-9, 5.0))
    matcher = biometric.NccMatcher(max_shift=f["max_shift"], angles=angles)

    idx_base = matcher.index(base.images)
    idx_synth = matcher.index(synth.images)
    n_pairs = f["n_pairs"]
    imp = biometric.score_pairs(biometric.make_pairs(base, "impostor", n_pairs, cfg.seed),
                                index_a=idx_base, matcher=matcher)
    ss = biometric.score_pairs(biometric.make_pairs(synth, "assumed_impostor", n_pairs, cfg.seed + 1),
                               index_a=idx_synth, matcher=matcher)
    sr = biometric.score_pairs(
        biometric.make_pairs(synth, "assumed_impostor", n_pairs, cfg.seed + 2, dataset_b=base),
        index_a=idx_synth, index_b=idx_base, matcher=matcher,
    )

    os.makedirs(os.path.join(out, "reports"), exist_ok=True)
    biometric.write_score_table(os.path.join(out, "reports", "scores_impostor.tsv"), imp,
                                ids_a=base.identities, ids_b=base.identities)
    biometric.write_score_table(os.path.join(out, "reports", "scores_synthetic_synthetic.tsv"), ss)
    biometric.write_score_table(os.path.join(out, "reports", "scores_synthetic_real.tsv"), sr,
                                ids_b=base.identities)
    rows = []
    for target in f["baseline_fars"]:
        analysis = biometric.far_analysis(
            imp.scores,
            {"synthetic_synthetic": ss.scores, "synthetic_real": sr.scores},
            baseline_far=target,
        )
        rows.append(analysis.to_text())
    _atomic_write(os.path.join(out, "reports", "far.tsv"), "".join(rows))
    for name, table in (("impostor", imp), ("synthetic_synthetic", ss), ("synthetic_real", sr)):
        cd = biometric.cumulative_distribution(table.scores)
        body = "# score\tcumulative_fraction\n" + "\n".join(f"{s:.17g}\t{c:.17g}" for s, c in cd)
        _atomic_write(os.path.join(out, "reports", f"cdf_{name}.tsv"), body + "\n")


def _task_spoof_hist(cfg: RunConfig, out: str) -> None:
    sp = cfg.values["spoof"]
    pad = cfg.values["data"]["pad_to"]
    live = data.load_image_dataset(sp["live_dataset"], pad_to=pad)
    spoof = data.load_image_dataset(sp["spoof_dataset"], pad_to=pad)
    if len(live) == 0 or len(spoof) == 0:
        raise ConfigurationError("[spoof] live/spoof datasets must be nonempty")
    scorer = biometric.CnnSpoofScorer().fit(live.images, spoof.images, epochs=sp["scorer_epochs"], seed=cfg.seed)
    os.makedirs(os.path.join(out, "reports"), exist_ok=True)
    hists = {
        "live": biometric.spoof_score_histogram(scorer, live.images, bins=sp["bins"]),
        "spoof": biometric.spoof_score_histogram(scorer, spoof.images, bins=sp["bins"]),
    }
    for extra in sp["eval_datasets"]:
        ds = data.load_image_dataset(extra, pad_to=pad)
        hists[os.path.basename(os.path.normpath(extra))] = biometric.spoof_score_histogram(
            scorer, ds.images, bins=sp["bins"]
        )
    overlap_lines = ["# dataset\toverlap_with_spoof\tmean_score\tn"]
    for name, hist in hists.items():
        _atomic_write(os.path.join(out, "reports", f"hist_{name}.tsv"), hist.to_rows())
        overlap_lines.append(
            f"{name}\t{biometric.histogram_overlap(hist, hists['spoof']):.17g}\t{hist.mean:.17g}\t{hist.n}"
        )
    _atomic_write(os.path.join(out, "reports", "spoof_overlap.tsv"), "\n".join(overlap_lines) + "\n")


def _task_synth_data(cfg: RunConfig, out: str) -> None:
    ds = _load_dataset(cfg)
    data.save_image_dataset(ds, os.path.join(out, "dataset"))
    _atomic_write(os.path.join(out, "dataset", "ridge_params.tsv"),
                  "\n".join(f"{k}\t{v}" for k, v in _ridge_params(cfg).to_dict().items()) + "\n")


_TASKS = {
    "train-ddpm": _task_train_ddpm,
    "train-wgan": _task_train_wgan,
    "train-cycle": _task_train_cycle,
    "sample": _task_sample,
    "translate": _task_translate,
    "evaluate": _task_evaluate,
    "far-analysis": _task_far_analysis,
    "spoof-hist": _task_spoof_hist,
    "synth-data": _task_synth_data,
}


def run(cfg: RunConfig) -> RunResult:
    """Execute a validated config; artifacts land under cfg.out_dir."""
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    _atomic_write(os.path.join(out, "config.effective.ini"), cfg.to_ini())
    try:
        _TASKS[cfg.task](cfg, out)
    except Exception as exc:
        _atomic_write(os.path.join(out, "failure.txt"),
                      f"task: {cfg.task}\nerror: {exc}\n\n{traceback.format_exc()}")
        raise
    return RunResult("ok", out, _list_artifacts(out))


def report_bundle(run_dir: str) -> str:
    """Render one consolidated report from a run directory.

    Numbers come straight from artifact files; anything missing is listed as
    absent rather than recomputed. Rendering is deterministic, so an
    unchanged run directory reproduces the identical document.
    """
    def read(relpath: str) -> str | None:
        p = os.path.join(run_dir, relpath)
        if os.path.exists(p):
            with open(p, "r", encoding="utf-8") as f:
                return f.read()
        return None

    lines = ["# run report", ""]
    config_text = read("config.effective.ini")
    if config_text:
        for want in ("task = ", "seed = "):
            for ln in config_text.splitlines():
                if ln.startswith(want):
                    lines.append(f"- {ln}")
                    break
    else:
        lines.append("- config: absent")
    failure = read("failure.txt")
    lines.append(f"- status: {'failed' if failure else 'ok'}")
    lines.append("")

    lines.append("## metrics")
    metrics_text = read(os.path.join("reports", "metrics.tsv"))
    if metrics_text:
        lines.extend(metrics_text.rstrip("\n").splitlines())
    else:
        lines.append("absent")
    lines.append("")

    lines.append("## far analysis")
    far_text = read(os.path.join("reports", "far.tsv"))
    if far_text:
        lines.extend(far_text.rstrip("\n").splitlines())
    else:
        lines.append("absent")
    lines.append("")

    lines.append("## spoof histograms")
    overlap = read(os.path.join("reports", "spoof_overlap.tsv"))
    if overlap:
        lines.extend(overlap.rstrip("\n").splitlines())
    else:
        lines.append("absent")
    lines.append("")

    lines.append("## training log (last record)")
    log_text = read("train_log.tsv")
    if log_text:
        rows = log_text.rstrip("\n").splitlines()
        lines.append(rows[0])
        lines.append(rows[-1] if len(rows) > 1 else "absent")
    else:
        lines.append("absent")
    lines.append("")

    lines.append("## artifacts")
    if os.path.isdir(run_dir):
        for rel in _list_artifacts(run_dir):
            if rel != "report.md":
                lines.append(f"- {rel}")
    else:
        lines.append("absent")
    return "\n".join(lines) + "\n"


def write_report_bundle(run_dir: str) -> str:
    text = report_bundle(run_dir)
    _atomic_write(os.path.join(run_dir, "report.md"), text)
    return text
