import argparse
import csv
import difflib
import os
import sys
from pathlib import Path

import numpy as np

from .errors import KGReasonError, NonFiniteLossError, ValidationError
from .evaluation import CSV_HEADER, evaluate_entities, evaluate_relations, metrics_report, score_eval_set
from .graph import norm_coefficients
from .io import ModelArtifact, load_dataset, load_labels, load_model, load_triples, save_model, synth, write_dataset
from .io.vocab import Vocab
from .model import encode, score_triples
from .train import TrainConfig, gradcheck_suite, train
from .utils import err, ok, setup_logging

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NONFINITE = 2
EXIT_GRADCHECK = 3

DECODER_FLAGS = {"full": "full", "diag": "diagonal"}


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors to the caller instead of exiting with 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


#
# Flag Checks
#

def _require_file(path, flag):
    if path is not None and not Path(path).is_file():
        raise ValidationError(f"{flag}: no such file: {path}")


def _require_parent(path, flag):
    if path is None:
        return
    parent = Path(path).parent
    if not parent.is_dir():
        raise ValidationError(f"{flag}: directory does not exist: {parent}")
    if not os.access(parent, os.W_OK):
        raise ValidationError(f"{flag}: directory is not writable: {parent}")


def _positive(flag, value):
    if value is not None and value < 1:
        raise ValidationError(f"{flag} must be >= 1, got {value}")


def _lookup(vocab: Vocab, name: str) -> int:
    idx = vocab.get(name)
    if idx is None:
        near = difflib.get_close_matches(name, vocab.names, n=3)
        hint = f"; did you mean: {', '.join(near)}" if near else ""
        raise ValidationError(f"unknown {vocab.kind} {name!r}{hint}")
    return idx


class KGReasonCommand:
    def __init__(self):
        self.arg_parser = self._init_arg_parser()

    @staticmethod
    def _init_arg_parser():
        defaults = TrainConfig()
        parser = ArgumentParser(
            prog="kgreason",
            description="""
            Joint entity classification and relation prediction over a knowledge graph.
            """,
            epilog="""
            Examples:
            kgreason synth --out data
            kgreason train --train data/train.tsv --valid data/valid.tsv --labels data/labels.tsv --out m.kgr
            kgreason eval --model m.kgr --triples data/test.tsv
            """
        )
        commands = parser.add_subparsers(dest="command", required=True, metavar="command")

        p = commands.add_parser("train", help="train a model and write the artifact")
        p.add_argument("--train", required=True, help="training triples, head<TAB>relation<TAB>tail")
        p.add_argument("--valid", help="validation triples, reported after training")
        p.add_argument("--labels", help="entity labels, entity<TAB>class")
        p.add_argument("--out", required=True, help="model artifact to write")
        p.add_argument("--history", help="per-epoch loss CSV to write, with validation metrics on --eval-every epochs")
        p.add_argument("--layers", type=int, default=defaults.num_layers)
        p.add_argument("--dim", type=int, default=defaults.hidden_dim)
        p.add_argument("--lr", type=float, default=defaults.learning_rate)
        p.add_argument("--lambda", dest="neg_weight", type=float, default=defaults.neg_weight,
                       help="weight of the negative-sample term")
        p.add_argument("--alpha", type=float, default=defaults.entity_weight,
                       help="weight of the entity classification term")
        p.add_argument("--negatives", type=int, default=defaults.negatives, help="negatives per positive")
        p.add_argument("--decoder", choices=sorted(DECODER_FLAGS), default="full")
        p.add_argument("--relational", action="store_true", help="one propagation matrix per relation")
        p.add_argument("--epochs", type=int, default=defaults.num_epochs)
        p.add_argument("--seed", type=int, default=defaults.seed)
        p.add_argument("--optimizer", choices=("adam", "sgd"), default=defaults.optimizer)
        p.add_argument("--beta1", type=float, default=defaults.beta1)
        p.add_argument("--beta2", type=float, default=defaults.beta2)
        p.add_argument("--eps", type=float, default=defaults.eps)
        p.add_argument("--no-entity-loss", action="store_true")
        p.add_argument("--eval-every", type=int, default=defaults.eval_every,
                       help="evaluate on --valid every N epochs, logged and added to --history (0 disables)")
        p.add_argument("-v", "--verbose", action="store_true", help="one log line per epoch")

        p = commands.add_parser("eval", help="score held-out triples against sampled negatives")
        p.add_argument("--model", required=True)
        p.add_argument("--triples", required=True)
        p.add_argument("--k-eval", type=int, default=1, help="negatives per positive")
        p.add_argument("--seed", type=int, default=defaults.seed)
        p.add_argument("--threshold", type=float, default=0.5)
        p.add_argument("--csv", help="append one metrics row to this CSV file")
        p.add_argument("--dump-scores", help="write every scored pair to this TSV file")
        p.add_argument("--labels", help="entity labels for classification metrics")
        p.add_argument("--skip-unseen", action="store_true",
                       help="skip triples touching entities with no training edges")
        p.add_argument("-v", "--verbose", action="store_true")

        p = commands.add_parser("predict", help="rank tails for a (head, relation) query")
        p.add_argument("--model", required=True)
        p.add_argument("--head", required=True)
        p.add_argument("--relation", required=True)
        p.add_argument("--k", type=int, default=10)
        p.add_argument("-v", "--verbose", action="store_true")

        p = commands.add_parser("gradcheck", help="finite-difference check of every gradient")
        p.add_argument("--seed", type=int, default=defaults.seed)
        p.add_argument("--dim", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("-v", "--verbose", action="store_true")

        p = commands.add_parser("synth", help="write a planted-structure dataset")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--entities", type=int, default=200)
        p.add_argument("--relations", type=int, default=3)
        p.add_argument("--classes", type=int, default=4)
        p.add_argument("--seed", type=int, default=defaults.seed)
        p.add_argument("-v", "--verbose", action="store_true")

        return parser

    def run(self, argv=None) -> int:
        try:
            args = self.arg_parser.parse_args(argv)
        except UsageError as e:
            err(str(e))
            return EXIT_USAGE
        except SystemExit as e:
            # --help
            return e.code if isinstance(e.code, int) else EXIT_OK

        setup_logging(args.verbose)
        handler = getattr(self, f"cmd_{args.command}")
        try:
            return handler(args)
        except NonFiniteLossError as e:
            err(f"training aborted: {e}")
            return EXIT_NONFINITE
        except KGReasonError as e:
            err(str(e))
            return EXIT_USAGE
        except OSError as e:
            err(f"{e.filename}: {e.strerror}" if e.filename else str(e))
            return EXIT_USAGE

    #
    # Subcommands
    #

    @staticmethod
    def config_from_args(args) -> TrainConfig:
        return TrainConfig(
            num_layers=args.layers,
            hidden_dim=args.dim,
            num_epochs=args.epochs,
            learning_rate=args.lr,
            neg_weight=args.neg_weight,
            entity_weight=args.alpha,
            negatives=args.negatives,
            seed=args.seed,
            decoder_form=DECODER_FLAGS[args.decoder],
            relational=args.relational,
            optimizer=args.optimizer,
            beta1=args.beta1,
            beta2=args.beta2,
            eps=args.eps,
            entity_loss_enabled=not args.no_entity_loss,
            eval_every=args.eval_every,
        ).validate()

    def cmd_train(self, args) -> int:
        config = self.config_from_args(args)
        for flag in ("train", "valid", "labels"):
            _require_file(getattr(args, flag), f"--{flag}")
        _require_parent(args.out, "--out")
        _require_parent(args.history, "--history")

        dataset = load_dataset(args.train, valid=args.valid, labels=args.labels)
        g = dataset.graph
        params, history = train(g, config, valid_triples=dataset.valid_triples)

        triples = np.array(g.triples, dtype=np.int64).reshape(-1, 3)
        save_model(
            ModelArtifact(config, params, dataset.entity_vocab, dataset.relation_vocab, dataset.class_vocab, triples),
            args.out,
        )
        ok(f"saved model to {args.out}")
        if args.history:
            history.write_csv(args.history)
        if history.exhausted_negatives:
            err(f"{history.exhausted_negatives} negatives could not avoid known triples")

        if dataset.valid_triples:
            report = evaluate_relations(params, g, dataset.valid_triples, k_eval=1, seed=config.seed)
            if g.has_labels:
                report = report.with_entities(evaluate_entities(params, g, g.labels, g.labeled_mask))
            print(report.to_text())
        return EXIT_OK

    def cmd_eval(self, args) -> int:
        _positive("--k-eval", args.k_eval)
        for flag in ("model", "triples", "labels"):
            _require_file(getattr(args, flag), f"--{flag}")
        _require_parent(args.csv, "--csv")
        _require_parent(args.dump_scores, "--dump-scores")

        artifact = load_model(args.model)
        entities, relations = artifact.entity_vocab, artifact.relation_vocab
        entities.freeze()
        relations.freeze()
        eval_triples = load_triples(args.triples, entities, relations).triples

        g = artifact.graph()
        scored, skipped = score_eval_set(
            artifact.params, g, eval_triples, k_eval=args.k_eval, seed=args.seed, skip_unseen=args.skip_unseen,
        )
        report = metrics_report(scored, args.threshold, skipped)
        if args.labels:
            labels = load_labels(args.labels, entities, artifact.class_vocab.freeze()).labels
            if np.any(labels >= 0):
                report = report.with_entities(evaluate_entities(artifact.params, g, labels, labels >= 0))

        print(report.to_text())
        if args.csv:
            fresh = not Path(args.csv).exists() or os.path.getsize(args.csv) == 0
            with open(args.csv, "a") as fp:
                if fresh:
                    fp.write(CSV_HEADER + "\n")
                fp.write(report.csv_row() + "\n")
        if args.dump_scores:
            with open(args.dump_scores, "w", newline="") as fp:
                writer = csv.writer(fp, delimiter="\t", lineterminator="\n")
                writer.writerow(["head", "relation", "tail", "label", "score"])
                for pair in scored:
                    h, r, t = pair.triple
                    writer.writerow([entities.name(h), relations.name(r), entities.name(t),
                                     int(pair.positive), repr(pair.score)])
        return EXIT_OK

    def cmd_predict(self, args) -> int:
        _positive("--k", args.k)
        _require_file(args.model, "--model")

        artifact = load_model(args.model)
        head = _lookup(artifact.entity_vocab, args.head)
        rel = _lookup(artifact.relation_vocab, args.relation)

        g = artifact.graph()
        params = artifact.params
        h = encode(g, norm_coefficients(g), params).final
        n = g.num_entities
        tails = np.arange(n)
        probs = score_triples(h, np.full(n, head), np.full(n, rel), tails, params)

        # descending probability, ties by entity id
        order = np.lexsort((tails, -probs))[:min(args.k, n)]
        for rank, t in enumerate(order, 1):
            print(f"{rank}\t{artifact.entity_vocab.name(int(t))}\t{probs[t]:.6f}")
        return EXIT_OK

    def cmd_gradcheck(self, args) -> int:
        _positive("--dim", args.dim)
        _positive("--layers", args.layers)

        results = gradcheck_suite(seed=args.seed, dim=args.dim, layers=args.layers)
        failed = []
        for name, report in results:
            status = "ok" if report.passed else "FAIL"
            print(f"topology={name} max_rel_err={report.max_rel_err:.3e} "
                  f"worst={report.worst_parameter} status={status}")
            if not report.passed:
                failed.append((name, report))

        if failed:
            for name, report in failed:
                err(f"{name}: gradient mismatch at {report.worst_parameter} (rel err {report.max_rel_err:.3e})")
            return EXIT_GRADCHECK
        return EXIT_OK

    def cmd_synth(self, args) -> int:
        out = Path(args.out)
        if out.exists() and not out.is_dir():
            raise ValidationError(f"--out: not a directory: {out}")
        if out.is_dir() and not os.access(out, os.W_OK):
            raise ValidationError(f"--out: directory is not writable: {out}")

        dataset = synth(args.entities, args.relations, args.classes, seed=args.seed)
        out.mkdir(parents=True, exist_ok=True)
        for path in write_dataset(dataset, out):
            ok(f"wrote {path}")
        return EXIT_OK


def main(argv=None) -> int:
    return KGReasonCommand().run(argv)
