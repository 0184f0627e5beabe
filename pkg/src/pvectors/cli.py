"""Command-line entry point: synth, fbank, train, embed, score, eval, gradcheck, params.

Settings come from three places, later ones winning: built-in defaults, a
``--config`` file of ``key=value`` lines, then explicit flags.

Exit codes: 0 ok, 1 usage, 2 config, 3 data or file format, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from pvectors.config import preset
from pvectors.errors import ConfigError, DivergenceError, FormatError, UsageError
from pvectors.experiment import pair_trials, speaker_centroids
from pvectors.features import read_features, wav_to_features, write_features
from pvectors.metrics import (
    adaptive_snorm,
    eer,
    min_dcf,
    read_embeddings,
    read_scores,
    read_trials,
    score_trials,
    write_embeddings,
    write_scores,
    write_trials,
)
from pvectors.model import count_by_namespace, load_checkpoint, model_from_checkpoint, save_checkpoint
from pvectors.training import Dataset, SynthSpec, TrainConfig, embed, gen_synth, train_stage1, train_stage2

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

# Built-in defaults for every setting a config file may carry.
DEFAULTS = {
    "preset": "toy",
    "seed": 0,
    "speakers": 20,
    "utterances": 16,
    "frames": 96,
    "noise": 0.3,
    "n_mels": 80,
    "epochs_stage1": 10,
    "epochs_stage2": 6,
    "batch": 32,
    "crop": 64,
    "lr_min": 1e-8,
    "lr_max": 1e-3,
    "cycle_epochs": 6,
    "margin": 0.2,
    "scale": 30.0,
    "top_k": 10,
    "samples": 100,
    "tol": 1e-3,
}
PATH_KEYS = ("data", "out", "wav_dir", "td", "tr", "model", "trials", "embeddings", "cohort", "scores", "log")
TYPES = {k: type(v) for k, v in DEFAULTS.items()}
TRAIN_KEYS = ("epochs_stage1", "epochs_stage2", "batch", "crop", "lr_min", "lr_max", "cycle_epochs", "margin", "scale", "seed")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pvectors", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_text):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", help="key=value file; explicit flags override its entries")
        return c

    c = cmd("synth", "write a seeded synthetic dataset directory")
    c.add_argument("--out")
    for key in ("seed", "speakers", "utterances", "frames", "noise"):
        c.add_argument("--" + key.replace("_", "-"), dest=key, type=TYPES[key])
    c.add_argument("--preset")
    c.add_argument("--with-trials", action="store_true", help="also write all-pairs trials")

    c = cmd("fbank", "convert a directory of 16-bit WAV files to feature files")
    c.add_argument("--wav-dir", dest="wav_dir")
    c.add_argument("--out")
    c.add_argument("--n-mels", dest="n_mels", type=int)

    c = cmd("train", "train a stage-1 branch or the coupled stage-2 model")
    c.add_argument("--stage", choices=("1td", "1tr", "2"), required=True)
    c.add_argument("--data")
    c.add_argument("--out")
    c.add_argument("--td", help="stage-1 TDNN checkpoint (stage 2)")
    c.add_argument("--tr", help="stage-1 Transformer checkpoint (stage 2)")
    c.add_argument("--log", help="per-step log: step, stage, lr, loss")
    c.add_argument("--preset")
    for key in TRAIN_KEYS:
        c.add_argument("--" + key.replace("_", "-"), dest=key, type=TYPES[key])

    c = cmd("embed", "write 'id dim v1 .. vD' embeddings for a dataset")
    c.add_argument("--model")
    c.add_argument("--data")
    c.add_argument("--out")
    c.add_argument("--centroids", action="store_true", help="one mean embedding per speaker (s-norm cohort)")

    c = cmd("score", "cosine-score trials, optionally with adaptive s-norm")
    c.add_argument("--trials")
    c.add_argument("--embeddings")
    c.add_argument("--cohort", help="cohort embedding file; enables adaptive s-norm")
    c.add_argument("--top-k", dest="top_k", type=int)
    c.add_argument("--out")

    c = cmd("eval", "print EER (percent) and minDCF for a score file")
    c.add_argument("--scores")

    c = cmd("gradcheck", "finite-difference check of the composed toy model")
    c.add_argument("--samples", type=int)
    c.add_argument("--tol", type=float)
    c.add_argument("--seed", type=int)

    c = cmd("params", "trainable parameter counts per namespace")
    c.add_argument("--preset")
    return p


def read_run_config(path) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    known = set(DEFAULTS) | set(PATH_KEYS)
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = TYPES[key](value) if key in TYPES else value
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the config file, then from DEFAULTS."""
    file_cfg = read_run_config(args.config) if getattr(args, "config", None) else {}
    for key, value in file_cfg.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    for key, value in DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    return args


def _need(args, *keys) -> None:
    missing = [k for k in keys if getattr(args, k, None) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _inputs(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")


def _outputs(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).resolve().parent.is_dir():
            raise FileNotFoundError(f"output directory does not exist: {Path(p).parent}")


# ---------------------------------------------------------------------------
# dataset directories: <id>.fb feature files plus an utt2spk index
# ---------------------------------------------------------------------------


def write_dataset(root, data: Dataset) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for uid, feat in zip(data.ids, data.feats):
        write_features(root / f"{uid}.fb", feat)
    (root / "utt2spk").write_text("".join(f"{u} {int(s)}\n" for u, s in zip(data.ids, data.labels)))


def read_dataset(root) -> Dataset:
    root = Path(root)
    index = root / "utt2spk"
    if not index.is_file():
        raise FileNotFoundError(f"{root}: no utt2spk index")
    ids, labels = [], []
    for lineno, line in enumerate(index.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2 or not parts[1].lstrip("-").isdigit():
            raise FormatError(f"{index}:{lineno}: expected 'utterance speaker_index'")
        ids.append(parts[0])
        labels.append(int(parts[1]))
    if not ids:
        raise FormatError(f"{index}: dataset is empty")
    # Stored as float32; widen so everything downstream runs in float64.
    feats = [read_features(root / f"{u}.fb").astype(np.float64) for u in ids]
    return Dataset(feats, np.array(labels, dtype=np.int64), ids)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    _need(args, "out")
    cfg = preset(args.preset)
    spec = SynthSpec(args.speakers, args.utterances, cfg.n_mels, args.frames, args.noise)
    data = gen_synth(spec, args.seed)
    write_dataset(args.out, data)
    if args.with_trials:
        write_trials(Path(args.out) / "trials", pair_trials(data))
    print(f"wrote {len(data)} utterances of {spec.speakers} speakers to {args.out}")
    return EXIT_OK


def cmd_fbank(args) -> int:
    _need(args, "wav_dir", "out")
    _inputs(args.wav_dir)
    wavs = sorted(Path(args.wav_dir).glob("*.wav"))
    if not wavs:
        raise FileNotFoundError(f"{args.wav_dir}: no .wav files")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for wav in wavs:
        write_features(out / f"{wav.stem}.fb", wav_to_features(wav, args.n_mels))
    print(f"wrote {len(wavs)} feature files to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _need(args, "data", "out")
    if args.stage == "2":
        _need(args, "td", "tr")
    _inputs(args.data, args.td, args.tr)
    _outputs(args.out, args.log)
    train_cfg = TrainConfig(**{k: getattr(args, k) for k in TRAIN_KEYS})
    data = read_dataset(args.data)
    lines: list[str] = []
    if args.stage == "2":
        ckpt, losses = train_stage2(load_checkpoint(args.td), load_checkpoint(args.tr), data, train_cfg, lines.append)
    else:
        model_cfg = preset(args.preset)
        if data.feats[0].shape[0] != model_cfg.n_mels:
            raise FormatError(f"features have {data.feats[0].shape[0]} mel bins, preset expects {model_cfg.n_mels}")
        ckpt, losses = train_stage1(args.stage[1:], data, model_cfg, train_cfg, lines.append)
    save_checkpoint(args.out, ckpt)
    if args.log:
        Path(args.log).write_text("step\tstage\tlr\tloss\n" + "".join(l + "\n" for l in lines))
    print(f"stage {args.stage}: {len(losses)} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return EXIT_OK


def cmd_embed(args) -> int:
    _need(args, "model", "data", "out")
    _inputs(args.model, args.data)
    _outputs(args.out)
    model = model_from_checkpoint(load_checkpoint(args.model))
    data = read_dataset(args.data)
    emb = embed(model, data.feats)
    if args.centroids:
        write_embeddings(args.out, [f"spk{s}" for s in np.unique(data.labels)], speaker_centroids(emb, data.labels))
    else:
        write_embeddings(args.out, data.ids, emb)
    return EXIT_OK


def cmd_score(args) -> int:
    _need(args, "trials", "embeddings", "out")
    _inputs(args.trials, args.embeddings, args.cohort)
    _outputs(args.out)
    table = read_embeddings(args.embeddings)
    scores = score_trials(read_trials(args.trials), table)
    if args.cohort:
        cohort = read_embeddings(args.cohort)
        scores = adaptive_snorm(scores, table, np.stack([cohort[k] for k in sorted(cohort)]), args.top_k)
    write_scores(args.out, scores)
    return EXIT_OK


def cmd_eval(args) -> int:
    _need(args, "scores")
    _inputs(args.scores)
    s = read_scores(args.scores)
    print(f"EER\t{100.0 * eer(s.scores, s.labels):.4f}\tminDCF\t{min_dcf(s.scores, s.labels):.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from pvectors.gradsuite import composed_model_check

    res = composed_model_check(samples=args.samples, seed=args.seed)
    ok = res.passed(args.tol)
    print(f"{res.name}\tchecked={res.checked}\tmax_rel_error={res.max_rel_error:.3e}\t{'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_params(args) -> int:
    from pvectors.model import PVectors

    cfg = preset(args.preset)
    counts = count_by_namespace(PVectors(cfg, np.random.default_rng(0)))
    for name, n in counts.items():
        print(f"{name}\t{n}")
    print(f"total\t{sum(counts.values())}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "fbank": cmd_fbank,
    "train": cmd_train,
    "embed": cmd_embed,
    "score": cmd_score,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = resolve(build_parser().parse_args(argv))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
