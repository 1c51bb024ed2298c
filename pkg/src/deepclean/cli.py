"""Command-line entry point: ``deepclean <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from contextlib import contextmanager, nullcontext
from pathlib import Path

import numpy as np

from . import __version__, container, detect, pca, pipeline, preprocess, report, signal_io, synth, vae
from .kvconfig import ConfigError, apply_kv, config_hash, read_kv, to_kv

log = logging.getLogger("deepclean")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    seed: int
    config_hash: str
    tool_version: str = __version__
    inputs: list = dataclasses.field(default_factory=list)
    outputs: list = dataclasses.field(default_factory=list)
    wall_clock: dict = dataclasses.field(default_factory=dict)

    def add_input(self, path) -> None:
        path = Path(path)
        for p in sorted(path.rglob("*")) if path.is_dir() else [path]:
            if p.is_file():
                self.inputs.append({"path": str(p), "sha256": sha256_file(p)})

    def add_output(self, path) -> None:
        self.outputs.append({"path": str(path), "sha256": sha256_file(path)})

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.wall_clock[name] = round(time.perf_counter() - t0, 3)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# helpers


def _load_config(obj, args):
    pairs = {}
    if args.config:
        pairs.update(read_kv(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return apply_kv(obj, pairs) if pairs else obj


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest_path(out: Path) -> Path:
    return out / "run-manifest.json" if out.is_dir() else out.with_name(out.name + ".run-manifest.json")


def _load_reconstructor(path):
    kind = container.peek_kind(path)
    if kind == "vae":
        return vae.load_model(path)
    if kind == "pca":
        return pca.load_pca(path)
    raise container.LoadError(f"{path}: unsupported model kind {kind!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, manifest: RunManifest) -> None:
    cfg = _load_config(synth.CorpusConfig(), args)
    if args.duration is not None:
        cfg = dataclasses.replace(cfg, duration_s=float(args.duration))
    manifest.config_hash = config_hash(cfg)
    out = _outdir(args.out)
    with manifest.stage("synthesize"):
        corpus = synth.synthesize(cfg, args.seed)
    with manifest.stage("write"):
        files = {
            "recording.csv": lambda p: signal_io.write_waveform(corpus.record, p),
            "clean.csv": lambda p: signal_io.write_waveform(corpus.clean, p),
            "truth.mask": lambda p: signal_io.write_mask(corpus.truth, p),
        }
        for name, fn in files.items():
            fn(out / name)
            manifest.add_output(out / name)
        arts = [dataclasses.asdict(a) for a in corpus.artefacts]
        (out / "artefacts.json").write_text(json.dumps(arts, indent=1) + "\n")
        manifest.add_output(out / "artefacts.json")
        (out / "corpus.cfg").write_text("".join(f"{k}={v}\n" for k, v in to_kv(cfg).items()))
        manifest.add_output(out / "corpus.cfg")
    prevalence = float(corpus.truth.flags.mean())
    print(f"{len(corpus.record)} samples, {len(corpus.artefacts)} artefacts, prevalence {prevalence:.4f}")


def cmd_preprocess(args, manifest: RunManifest) -> None:
    cfg = _load_config(preprocess.PreprocessConfig(seed=args.seed), args)
    manifest.config_hash = config_hash(cfg)
    manifest.add_input(args.input)
    record = signal_io.read_waveform(args.input)
    annotations = labels = None
    if args.annotations:
        manifest.add_input(args.annotations)
        annotations = signal_io.read_mask(args.annotations)
    if args.labels:
        manifest.add_input(args.labels)
        labels = signal_io.read_mask(args.labels)
    out = _outdir(args.out)
    with manifest.stage("preprocess"):
        marked, _, bundle = preprocess.preprocess(record, cfg, annotations, labels)
    with manifest.stage("write"):
        signal_io.write_mask(marked, out / "marked.mask")
        manifest.add_output(out / "marked.mask")
        for p in preprocess.save_bundle(bundle, out):
            manifest.add_output(p)
    print(f"train {len(bundle.train)}, validation {len(bundle.validation)}, test {len(bundle.test)} "
          f"({sum(bool(w.label) for w in bundle.test)} labelled artefact)")


def _single_latent(args) -> int:
    if not args.latent or len(args.latent) != 1:
        raise UsageError("give exactly one --latent value")
    return args.latent[0]


def cmd_train(args, manifest: RunManifest) -> None:
    hyper = _load_config(vae.TrainHyper(), args)
    ld = _single_latent(args)
    manifest.config_hash = config_hash(hyper)
    manifest.add_input(args.data)
    bundle = preprocess.load_bundle(args.data)
    seeds = pipeline.restart_seeds(args.seed, args.restarts)
    with manifest.stage("train"):
        model = pipeline.train_vae(bundle, ld, hyper, seeds)
    with manifest.stage("calibrate"):
        model.thresholds = detect.calibrate_thresholds(model, bundle.matrix("train")).to_dict()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vae.save_model(model, out)
    manifest.add_output(out)
    print(f"Ld={ld}: best restart {model.training_meta['restart']} "
          f"validation loss {model.training_meta['val_loss']:.4f}")


def cmd_fit_pca(args, manifest: RunManifest) -> None:
    k = _single_latent(args)
    manifest.config_hash = config_hash(detect.CalibrationConfig())
    manifest.add_input(args.data)
    bundle = preprocess.load_bundle(args.data)
    x = bundle.matrix("train")
    with manifest.stage("fit"):
        model = pca.fit_pca(x, k)
        model.standardizer = bundle.standardizer
        model.thresholds = detect.calibrate_thresholds(model, x).to_dict()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pca.save_pca(model, out)
    manifest.add_output(out)


def cmd_detect(args, manifest: RunManifest) -> None:
    manifest.config_hash = "-"
    manifest.add_input(args.model)
    manifest.add_input(args.input)
    model = _load_reconstructor(args.model)
    if model.thresholds is None or model.standardizer is None:
        raise container.LoadError("model carries no thresholds or standardizer; retrain or refit it")
    record = signal_io.read_waveform(args.input)
    with manifest.stage("detect"):
        starts, results, flags, imputed = pipeline.detect_recording(model, record)
    out = _outdir(args.out)
    detect.write_detection_csv(zip(starts, results), out / "detections.csv")
    signal_io.write_mask(signal_io.MarkMask(flags), out / "artefacts.mask")
    cleaned = signal_io.WaveformRecord(imputed, record.sampling_rate, record.segment_starts,
                                       np.isnan(imputed))
    signal_io.write_waveform_binary(cleaned, out / "imputed.bin")
    for name in ("detections.csv", "artefacts.mask", "imputed.bin"):
        manifest.add_output(out / name)
    print(f"{sum(r.is_artefact for r in results)}/{len(results)} windows flagged; "
          f"{int(flags.sum())} timepoints masked")


def _emit(results: report.SweepResults, formats, out: Path, manifest: RunManifest, stem: str = "report"):
    for fmt in formats:
        suffix = "md" if fmt == "table" else fmt
        path = report.emit_report(results, fmt, out / f"{stem}.{suffix}")
        manifest.add_output(path)


def cmd_evaluate(args, manifest: RunManifest) -> None:
    manifest.config_hash = "-"
    manifest.add_input(args.data)
    bundle = preprocess.load_bundle(args.data)
    out = _outdir(args.out)
    rows = []
    for path in args.models:
        manifest.add_input(path)
        model = _load_reconstructor(path)
        if isinstance(model, pca.PcaModel):
            method, ld = "pca", model.k
        else:
            method, ld = "vae", model.latent_dim
        th = (detect.Thresholds.from_dict(model.thresholds) if model.thresholds
              else detect.calibrate_thresholds(model, bundle.matrix("train")))
        with manifest.stage(f"evaluate {method} {ld}"):
            rows.append(pipeline.evaluate_reconstructor(model, bundle, method, ld, th))
    results = report.SweepResults(rows, {"bundle": pipeline.bundle_digest(bundle)})
    _emit(results, args.format or ["json", "csv", "svg"], out, manifest)


def cmd_sweep(args, manifest: RunManifest) -> None:
    cfg = _load_config(pipeline.SweepConfig(restarts=args.restarts), args)
    if args.latent:
        cfg = dataclasses.replace(cfg, latent_dims=tuple(args.latent))
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs))
    manifest.config_hash = config_hash(cfg)
    out = _outdir(args.out)
    if args.data:
        manifest.add_input(args.data)
        bundle = preprocess.load_bundle(args.data)
    else:
        ccfg = synth.CorpusConfig()
        pcfg = preprocess.PreprocessConfig(seed=args.seed)
        if args.corpus_config:
            manifest.add_input(args.corpus_config)
            ccfg = apply_kv(ccfg, read_kv(args.corpus_config))
        if args.preprocess_config:
            manifest.add_input(args.preprocess_config)
            pcfg = apply_kv(pcfg, read_kv(args.preprocess_config))
        if args.duration is not None:
            ccfg = dataclasses.replace(ccfg, duration_s=float(args.duration))
        with manifest.stage("synthesize"):
            corpus = synth.synthesize(ccfg, args.seed)
        with manifest.stage("preprocess"):
            _, _, bundle = preprocess.preprocess(corpus.record, pcfg, labels=corpus.truth)
    models: dict = {}
    with manifest.stage("sweep"):
        results = pipeline.run_sweep(bundle, cfg, args.seed, models)
    if args.save_models:
        for (method, ld), model in sorted(models.items()):
            path = out / f"{method}-ld{ld}.dc"
            (vae.save_model if method == "vae" else pca.save_pca)(model, path)
            manifest.add_output(path)
    _emit(results, args.format or ["json", "csv", "svg", "table"], out, manifest)
    print(report.render_tables(results))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deepclean", description="Reconstruction-based artefact detection for pressure waveforms.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, latent=False, formats=False):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="key=value file overriding defaults")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="single config override")
        sp.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
        sp.add_argument("-v", "--verbose", action="store_true")
        if latent:
            sp.add_argument("--latent", type=int, nargs="+")
        if formats:
            sp.add_argument("--format", action="append", choices=["json", "csv", "svg", "table"])

    s = sub.add_parser("synth", help="build a synthetic corpus")
    common(s)
    s.add_argument("--duration", type=float, help="seconds")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="mark abnormal data and build datasets")
    common(s)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--annotations", help="mask of manually marked regions")
    s.add_argument("--labels", help="ground-truth mask attached to test windows")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a VAE with restarts")
    common(s, latent=True)
    s.add_argument("--data", required=True)
    s.add_argument("--restarts", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fit-pca", help="fit the PCA baseline")
    common(s, latent=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_pca)

    s = sub.add_parser("detect", help="classify, localise and impute a recording")
    common(s)
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", default="detections")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("evaluate", help="metrics and reports for saved models")
    common(s, formats=True)
    s.add_argument("--data", required=True)
    s.add_argument("--models", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="train and evaluate both methods over latent dimensions")
    common(s, latent=True, formats=True)
    s.add_argument("--data", help="dataset bundle; synthesised from --seed when omitted")
    s.add_argument("--duration", type=float, help="corpus seconds when synthesising")
    s.add_argument("--corpus-config", help="key=value file for the synthetic corpus")
    s.add_argument("--preprocess-config", help="key=value file for preprocessing")
    s.add_argument("--restarts", type=int, default=5)
    s.add_argument("--epochs", type=int)
    s.add_argument("--save-models", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"deepclean: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, argv, args.seed, "")
    try:
        with _thread_limit(args.threads):
            args.func(args, manifest)
    except (UsageError, ConfigError) as exc:
        print(f"deepclean: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (vae.NumericalError, vae.TrainingError, FloatingPointError) as exc:
        print(f"deepclean: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"deepclean: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out = Path(args.out)
    if out.exists():
        manifest.write(_manifest_path(out))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
