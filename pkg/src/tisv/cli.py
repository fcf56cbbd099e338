"""Command-line entry point.

Exit codes: 0 success / accept, 1 reject or failed check, 2 configuration
error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .asr_head import KeywordVocabulary
from .config import RunConfig
from .data import Corpus, apply_split, fit_length, generate_synthetic, make_split, read_manifest, read_wav
from .data import SplitSpec, corpus_from_segments, segment_by_manifest
from .errors import ConfigurationError, DataError, TisvError
from .gradcheck import check_suite
from .network import config_of, embed_matrix
from .params import ParameterStore
from .trainer import finetune_adversarial, pretrain_speaker_softmax
from .verification import DecisionPolicy, EvalReport, SpeakerModel, decide, enroll, run_tk_ntk_protocol, score

log = logging.getLogger("tisv")

EXIT_OK, EXIT_REJECT = 0, 1
REPORT_NAME = "eval_report.json"


def _out_dir(path: str) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_corpus(args, cfg: RunConfig) -> Corpus:
    if getattr(args, "manifest", None):
        rows = read_manifest(args.manifest)
        res = segment_by_manifest(rows, args.audio_root or Path(args.manifest).parent)
        for err in res.errors:
            log.warning("manifest: %s", err)
        if not res.segments:
            raise DataError(f"manifest {args.manifest} yielded no usable segments")
        return corpus_from_segments(res.segments, cfg.network().input_len)
    if not args.data:
        raise ConfigurationError("either --data or --manifest is required")
    return Corpus.load(args.data)


def _write_log(path: Path, record) -> None:
    path.write_text("".join(line + "\n" for line in record.log_lines()), encoding="utf-8")
    timing = path.with_suffix(".timing.json")
    timing.write_text(json.dumps({"wall_clock_seconds": record.wall_clock}) + "\n", encoding="utf-8")


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    spec = cfg.synth_spec()
    corpus, _ = generate_synthetic(spec)
    corpus.meta["config_hash"] = cfg.hash()
    corpus.save(out)
    cfg.write(out)
    _emit({"utterances": len(corpus), "speakers": len(corpus.speaker_set()),
           "keywords": corpus.keyword_set(), "out": str(out), "config_hash": cfg.hash()})
    return EXIT_OK


def cmd_train_base(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    corpus = _load_corpus(args, cfg)
    store, record = pretrain_speaker_softmax(corpus, cfg.network(), cfg.pretrain())
    store.meta["config_hash"] = cfg.hash()
    store.save(out / "base.ckpt")
    _write_log(out / "train_log.tsv", record)
    cfg.write(out)
    _emit({"checkpoint": str(out / "base.ckpt"), "parameters": store.num_parameters(),
           "final_train_acc": record.epochs[-1]["train_acc"] if record.epochs else None,
           "config_hash": cfg.hash()})
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    base = ParameterStore.load(args.base)
    corpus = _load_corpus(args, cfg)
    ft = cfg.finetune()
    keywords = cfg.finetune_keywords() or corpus.keyword_set()[: ft.n_keywords]
    sp = cfg.values["split"]
    split = make_split(corpus.filter(keywords=keywords), int(sp["train_speakers"]), int(sp["eval_speakers"]),
                       cfg.seed, keywords)
    train, val, _ = apply_split(corpus, split, keywords)
    vocab = KeywordVocabulary(keywords)
    store, head, record = finetune_adversarial(base, train, ft, validation=val, vocabulary=vocab,
                                               m_enroll=int(cfg.values["eval"]["m_enroll"]))
    store.meta["config_hash"] = cfg.hash()
    store.save(out / "finetuned.ckpt")
    if head is not None:
        head.meta["config_hash"] = cfg.hash()
        head.save(out / "asr_head.ckpt")
    vocab.save(out / "vocabulary.txt")
    split_doc = split.to_dict() | {"keywords": keywords, "config_hash": cfg.hash()}
    (out / "split.json").write_text(json.dumps(split_doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    _write_log(out / "train_log.tsv", record)
    cfg.write(out)
    _emit({"checkpoint": str(out / "finetuned.ckpt"), "steps": len(record.steps), "gamma": ft.gamma,
           "config_hash": cfg.hash()})
    return EXIT_OK


def _embed_wavs(store: ParameterStore, paths: list[str]) -> np.ndarray:
    net = config_of(store)
    waves = [fit_length(read_wav(p).samples, net.input_len) for p in paths]
    return embed_matrix(store, np.stack(waves))


def cmd_enroll(args, cfg: RunConfig) -> int:
    store = ParameterStore.load(args.checkpoint)
    emb = _embed_wavs(store, args.wav)
    model = enroll(list(emb), args.speaker, args.keyword)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out, extra={"config_hash": cfg.hash(), "checkpoint_digest": store.digest()})
    _emit({"model": str(out), "speaker": args.speaker, "m": model.m, "config_hash": cfg.hash()})
    return EXIT_OK


def _latest_report(search: list[Path]) -> Path | None:
    found = []
    for d in search:
        if d.is_dir():
            found.extend(p for p in d.glob(f"*{REPORT_NAME}") if p.is_file())
    if not found:
        return None
    return max(found, key=lambda p: (p.stat().st_mtime_ns, str(p)))


def _resolve_tau(args) -> tuple[float, str]:
    if args.tau is not None:
        return float(args.tau), "flag"
    path = Path(args.report) if args.report else _latest_report(
        [Path(args.checkpoint).parent, Path(args.model).parent, Path.cwd()])
    if path is None:
        raise ConfigurationError("no --tau given and no evaluation report found to take the EER threshold from")
    rep = EvalReport.load(path)
    tau = rep.threshold_all
    if tau is None:
        raise ConfigurationError(f"report {path} carries no EER threshold")
    return float(tau), str(path)


def cmd_verify(args, cfg: RunConfig) -> int:
    tau, source = _resolve_tau(args)
    policy = DecisionPolicy(float(np.clip(tau, -1.0, 1.0)))
    store = ParameterStore.load(args.checkpoint)
    model = SpeakerModel.load(args.model)
    emb = _embed_wavs(store, [args.wav])[0]
    s = score(model, emb)
    decision = decide(s, policy)
    _emit({"score": s, "tau": policy.threshold, "tau_source": source, "decision": decision,
           "speaker": model.speaker_id, "config_hash": cfg.hash()})
    return EXIT_OK if decision == "accept" else EXIT_REJECT


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    store = ParameterStore.load(args.checkpoint)
    corpus = Corpus.load(args.data)
    train_speakers: list[str] = []
    if args.split:
        doc = json.loads(Path(args.split).read_text(encoding="utf-8"))
        split = SplitSpec(doc["train_keyword"], doc["validation"], doc["eval_speakers"], doc["seed"])
        train_speakers = split.train_speakers
        corpus = corpus.filter(speakers=split.eval_speakers, keywords=doc.get("keywords"))
    corpus = corpus.with_length(config_of(store).input_len)
    m = args.m if args.m is not None else int(cfg.values["eval"]["m_enroll"])
    seed = args.seed if args.seed is not None else cfg.seed
    rep = run_tk_ntk_protocol(store, corpus, m, seed, train_speakers)
    rep.config_hash = cfg.hash()
    rep.extra["checkpoint_digest"] = store.digest()
    rep.save(out / REPORT_NAME)
    cfg.write(out)
    _emit({"eer_tk": rep.eer_tk, "eer_ntk": rep.eer_ntk, "eer_avg": rep.eer_avg,
           "threshold": rep.threshold_all, "report": str(out / REPORT_NAME), "config_hash": cfg.hash()})
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    results = check_suite(seed=cfg.seed)
    ok = True
    print(f"{'check':24s} {'max_rel_err':>12s} {'coords':>7s} {'kinks':>6s}  result")
    for name, rep in results:
        passed = rep.passed(args.tol)
        ok &= passed
        print(f"{name:24s} {rep.max_rel_err:12.3e} {rep.n_checked:7d} {len(rep.kinks):6d}  "
              f"{'PASS' if passed else 'FAIL'}")
    print(f"config_hash {cfg.hash()}")
    return EXIT_OK if ok else EXIT_REJECT


def cmd_show_config(args, cfg: RunConfig) -> int:
    _emit({"config": cfg.to_dict(), "config_hash": cfg.hash()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key-value config file (INI syntax)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    ap = argparse.ArgumentParser(prog="tisv", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"tisv {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_gen_data)

    for name, fn, helptext in (("train-base", cmd_train_base, "pretrain the embedding network"),
                               ("finetune", cmd_finetune, "triplet + keyword-adversarial fine-tuning")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", help="corpus directory written by gen-data")
        p.add_argument("--manifest", help="CSV manifest (path,speaker,keyword,start,end) instead of --data")
        p.add_argument("--audio-root", help="base directory for relative manifest paths")
        p.add_argument("--out", required=True, help="output directory")
        if name == "finetune":
            p.add_argument("--base", required=True, help="pretrained checkpoint")
        p.set_defaults(fn=fn)

    p = sub.add_parser("enroll", parents=[common], help="build a speaker model from enrollment WAVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", nargs="+", required=True, help="enrollment WAV files (16-bit mono)")
    p.add_argument("--speaker", required=True)
    p.add_argument("--keyword", help="keyword spoken in the enrollment audio, recorded in the model")
    p.add_argument("--out", required=True, help="speaker-model JSON path")
    p.set_defaults(fn=cmd_enroll)

    p = sub.add_parser("verify", parents=[common], help="score one WAV against a speaker model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", required=True, help="speaker-model JSON from enroll")
    p.add_argument("--wav", required=True)
    p.add_argument("--tau", type=float, help="decision threshold; default is the EER threshold of the latest report")
    p.add_argument("--report", help="evaluation report to take the threshold from")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("evaluate", parents=[common], help="TK/NTK EER evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", help="split.json from finetune; restricts to its evaluation speakers and keywords")
    p.add_argument("--m", type=int, help="enrollment utterances per speaker (default [eval] m_enroll)")
    p.add_argument("--seed", type=int, help="enrollment draw seed (default [run] seed)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("show-config", parents=[common], help="print the effective config and its hash")
    p.set_defaults(fn=cmd_show_config)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_file(args.config, args.set)
        return args.fn(args, cfg)
    except TisvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
