"""Command-line interface: ``rkn {kernel,train,embed,eval,gradcheck,synth}``.

Errors print one line ``error=<Kind> detail=<message>`` to stderr and exit
with status 2 (3 when training diverges).
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import sys

import numpy as np

from .core import embed_dataset
from .encoding import Encoder, LabeledDataset, read_fasta, read_labels, write_fasta, write_labels
from .exceptions import Diverged, LabelMismatch, RKNError
from .io import atomic_write_text, parse_config, read_features, write_features
from .metrics import evaluate
from .model_io import load_model, model_hash, save_model
from .oracle import GapWeighting, KernelSpec, gram_matrix, save_gram
from .synth import synth_gen
from .training import Architecture, TrainConfig, gradient_check, train_supervised, train_unsupervised

__all__ = ["main", "build_parser", "GRADCHECK_CONFIGS"]

GRADCHECK_CONFIGS = [(p, n, w) for p in ("mean", "max", "gmp") for n in (1, 2) for w in ("gaps", "end")]


def _tuple_of_floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _int_or_list(text):
    parts = text.replace(",", " ").split()
    return int(parts[0]) if len(parts) == 1 else [int(p) for p in parts]


def _float_or_list(text):
    parts = text.replace(",", " ").split()
    return float(parts[0]) if len(parts) == 1 else [float(p) for p in parts]


CONFIG_KEYS = {
    # training
    "loss": str, "mu": float, "epochs": int, "lr": float, "beta1": float, "beta2": float,
    "adam_eps": float, "patience": int, "batch_size": int, "seed": int, "mode": str,
    "val_fraction": float, "mu_grid": _tuple_of_floats, "cv_folds": int, "kmer_sample": int,
    "kmeans_iters": int, "train_alpha": _bool, "linear_tol": float, "workers": int,
    # architecture
    "k": _int_or_list, "q": _int_or_list, "alpha": _float_or_list, "lambda": _float_or_list,
    "weighting": str, "pooling": str, "gmp_gamma": float, "layers": int, "epsilon": _optional_float,
    # input
    "encoder": str,
}
ARCH_KEYS = {"k", "q", "alpha", "lambda", "weighting", "pooling", "gmp_gamma", "layers", "epsilon"}


def _fail(kind, detail, code=2):
    detail = " ".join(str(detail).split())
    print(f"error={kind} detail={detail}", file=sys.stderr)
    return code


def _encode_records(records, encoder):
    return [encoder(seq, sid) for sid, seq in records]


def _labels_for(records, labels, path):
    missing = [sid for sid, _ in records if sid not in labels]
    if missing:
        raise LabelMismatch(f"{path}: no label for sequence {missing[0]!r}")
    return np.array([labels[sid] for sid, _ in records], dtype=np.int64)


# --------------------------------------------------------------------------
# subcommands


def cmd_kernel(args):
    encoder = Encoder.from_id(args.encoder)
    seqs = _encode_records(read_fasta(args.fasta), encoder)
    spec = KernelSpec(kind=args.kernel, k=args.k, alpha=args.alpha,
                      weighting=GapWeighting(args.weighting, args.lam),
                      beta=args.beta, c=args.c, kmax=args.kmax or args.k)
    gram = gram_matrix(seqs, spec, method=args.method, normalize=args.normalize, workers=args.workers)
    save_gram(gram, args.out)
    print(f"wrote {args.out} n={len(seqs)}")
    return 0


def _train_settings(args):
    values = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            values.update(parse_config(fh.read(), CONFIG_KEYS))
    for key, attr in (("k", "k"), ("q", "q"), ("alpha", "alpha"), ("lambda", "lam"), ("weighting", "weighting"),
                      ("pooling", "pooling"), ("layers", "layers"), ("epsilon", "epsilon"), ("seed", "seed"),
                      ("workers", "workers"), ("mode", "mode"), ("encoder", "encoder"), ("epochs", "epochs"),
                      ("mu", "mu")):
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = value
    arch = {("lam" if k == "lambda" else k): v for k, v in values.items() if k in ARCH_KEYS}
    train = {k: v for k, v in values.items() if k not in ARCH_KEYS and k != "encoder"}
    return values.get("encoder", "dna"), arch, train


def cmd_train(args):
    encoder_id, arch_kw, train_kw = _train_settings(args)
    encoder = Encoder.from_id(encoder_id)
    records = read_fasta(args.fasta)
    y_raw = _labels_for(records, read_labels(args.labels), args.labels)
    classes = np.unique(y_raw)
    if len(classes) < 2:
        raise LabelMismatch(f"{args.labels}: labels cover {len(classes)} class(es); need at least 2")
    binary = len(classes) == 2
    codes = np.searchsorted(classes, y_raw)
    labels = 2 * codes - 1 if binary else codes
    train_kw.setdefault("loss", "logistic" if binary else "multinomial")
    config = TrainConfig(**train_kw)
    arch = Architecture(**arch_kw)
    data = LabeledDataset(_encode_records(records, encoder), labels, "binary" if binary else "multiclass")
    log_path = args.log or f"{args.out}.log"
    log_buffer = io.StringIO()
    try:
        if config.mode == "unsupervised":
            model = train_unsupervised(data, config, arch, encoder.id)
        else:
            model = train_supervised(data, None, config, arch=arch, encoder_id=encoder.id, log_stream=log_buffer)
    finally:
        atomic_write_text(log_path, log_buffer.getvalue())
    config_blob = json.dumps({"train": {k: str(v) for k, v in sorted(vars(config).items())},
                              "arch": {k: str(v) for k, v in sorted(vars(arch).items())}}, sort_keys=True)
    model.provenance.update(config_hash=hashlib.sha256(config_blob.encode()).hexdigest(),
                            classes=[int(c) for c in classes])
    save_model(model, args.out)
    print(f"model={args.out} sha256={model_hash(model)}")
    if "best_val_loss" in model.provenance:
        print(f"val_loss={model.provenance['best_val_loss']:.10g} best_epoch={model.provenance['best_epoch']}")
    else:
        print(f"mu={model.provenance['mu']:.6g}")
    return 0


def cmd_embed(args):
    model = load_model(args.model)
    encoder = Encoder.from_id(model.encoder_id)
    records = read_fasta(args.fasta)
    seqs = _encode_records(records, encoder)
    F = embed_dataset(seqs, model, concat=args.concat, workers=args.workers, standardize=not args.concat)
    write_features(args.out, [sid for sid, _ in records], F)
    print(f"wrote {args.out} n={F.shape[0]} dim={F.shape[1]}")
    return 0


def cmd_eval(args):
    if args.features:
        ids, F = read_features(args.features)
        if args.model:
            # feature files from `embed` are already standardized
            model = load_model(args.model)
            scores = F @ model.W + model.bias
        else:
            scores = F[:, 0] if F.shape[1] == 1 else F
    elif args.fasta and args.model:
        model = load_model(args.model)
        records = read_fasta(args.fasta)
        ids = [sid for sid, _ in records]
        scores = model.scores(embed_dataset(_encode_records(records, Encoder.from_id(model.encoder_id)), model,
                                            workers=args.workers))
    else:
        raise RKNError("give --features, or --fasta together with --model")
    labels = read_labels(args.labels)
    y = _labels_for([(i, None) for i in ids], labels, args.labels)
    if scores.ndim == 2 and args.model:
        classes = load_model(args.model).provenance.get("classes")
        if classes is not None:
            y = np.searchsorted(np.asarray(classes), y)
    report = evaluate(y, scores, ks=tuple(args.topk))
    text = str(report)
    print(text)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    return 0


def cmd_gradcheck(args):
    worst = 0.0
    for pooling, layers, weighting in GRADCHECK_CONFIGS:
        err = gradient_check(pooling, layers, weighting, train_alpha=args.train_alpha, n_coords=args.coords,
                             step=args.step, seed=args.seed)
        worst = max(worst, err)
        print(f"pooling={pooling} layers={layers} weighting={weighting} max_rel_err={err:.3e}")
    print(f"max_rel_err={worst:.3e}")
    return 0 if worst <= args.tol else 1


def cmd_synth(args):
    records, labels, motif = synth_gen(args.seed, args.n, args.length, args.motif_length, args.gap_rate,
                                       Encoder.from_id(args.encoder).alphabet)
    buf = io.StringIO()
    write_fasta(records, buf)
    atomic_write_text(args.fasta, buf.getvalue())
    buf = io.StringIO()
    write_labels([(sid, int(lab)) for (sid, _), lab in zip(records, labels)], buf)
    atomic_write_text(args.labels, buf.getvalue())
    print(f"wrote {args.fasta} {args.labels} n={len(records)} motif={motif}")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--workers", type=int, default=1, help="threads for embedding / Gram entries")


def _add_arch(p, defaults=False):
    d = (lambda v: v) if defaults else (lambda v: None)
    p.add_argument("--k", type=int, default=d(6), help="motif length")
    p.add_argument("--q", type=int, default=d(16), help="number of motifs")
    p.add_argument("--alpha", type=float, default=d(0.5), help="Gaussian bandwidth")
    p.add_argument("--lambda", dest="lam", type=float, default=d(0.5), help="gap penalty")
    p.add_argument("--weighting", choices=("gaps", "end"), default=d("gaps"))
    p.add_argument("--pooling", choices=("mean", "max", "gmp"), default=d("mean"))
    p.add_argument("--layers", type=int, default=d(1))
    p.add_argument("--epsilon", type=float, default=None, help="Gram regularization (default 1e-6 trace/q)")


def build_parser():
    parser = argparse.ArgumentParser(prog="rkn", description="Recurrent kernel networks for biological sequences.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kernel", help="exact Gram matrix of a FASTA file")
    p.add_argument("fasta")
    p.add_argument("--out", required=True)
    p.add_argument("--kernel", choices=("substring", "relaxed", "relaxed_sum", "local_align"), default="relaxed")
    p.add_argument("--encoder", default="dna", help="dna, protein, blosum62 or onehot:<symbols>")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--kmax", type=int, default=None)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--weighting", choices=("gaps", "end"), default="gaps")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--method", choices=("dp", "enum"), default="dp")
    p.add_argument("--normalize", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("train", help="fit a model")
    p.add_argument("fasta")
    p.add_argument("labels")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--mode", choices=("supervised", "unsupervised"), default=None)
    p.add_argument("--encoder", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--log", help="training log (default <out>.log)")
    _add_arch(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="feature matrix of a FASTA file")
    p.add_argument("fasta")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--concat", action="store_true", help="concatenate the k prefix embeddings")
    _add_common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="auROC / auROC50 / top-k")
    p.add_argument("labels")
    p.add_argument("--features", help="feature file (scores, or features when --model is given)")
    p.add_argument("--fasta")
    p.add_argument("--model")
    p.add_argument("--out", help="report file")
    p.add_argument("--topk", type=int, nargs="+", default=[1, 5])
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradient paths")
    p.add_argument("--coords", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--train-alpha", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="motif-implant benchmark data")
    p.add_argument("--fasta", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--length", type=int, default=100)
    p.add_argument("--motif-length", type=int, default=8)
    p.add_argument("--gap-rate", type=float, default=0.2)
    p.add_argument("--encoder", default="dna")
    _add_common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command != "train" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except Diverged as exc:
        return _fail("Diverged", exc, code=3)
    except RKNError as exc:
        return _fail(type(exc).__name__, exc)
    except FileNotFoundError as exc:
        return _fail("FileNotFound", f"{exc.filename}: {exc.strerror}")
    except OSError as exc:
        return _fail(type(exc).__name__, f"{getattr(exc, 'filename', '')}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
