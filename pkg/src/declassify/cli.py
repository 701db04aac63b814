"""Command-line entry point: ``declassify <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import cht, ola
from .binary_image import format_sections, load_elf, open_image
from .ctor_dtor import format_classification
from .errors import DeclassifyError, InputError
from .evaluation import falses_report, format_falses, load_ground_truth, score
from .facts import dump_facts, load_facts
from .generator import DEFAULT_SEED, GenConfig, generate_corpus
from .vtables import ClassTable, dump_vtables, extract_vtables, format_groups, group_vtables, load_vtables

log = logging.getLogger("declassify")

EXIT_USAGE = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _hex(text):
    return int(text, 0)


def _write(text, path):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _binary_tables(path, pure=None):
    from .ingest import CapstoneProvider, vtable_candidates
    image = open_image(path)
    provider = CapstoneProvider(image)
    tables, handler = extract_vtables(image, vtable_candidates(image, provider), pure)
    return image, tables, handler


def _binary_facts(path, pure=None, cfg_order=False):
    from .ingest import ingest_binary
    image, tables, handler = _binary_tables(path, pure)
    facts = ingest_binary(image, tables, cfg_order=cfg_order)
    return tables, handler, facts


def _inputs(args):
    """Facts and classes from a binary or from ``--facts`` + ``--vtables``."""
    if args.binary:
        tables, _, facts = _binary_facts(args.binary, args.pure_virtual_addr, args.cfg_order)
    else:
        if not args.facts or not args.vtables:
            raise _Usage("give a binary, or both --facts and --vtables")
        facts = load_facts(args.facts)
        tables, _ = load_vtables(args.vtables)
    return facts, ClassTable.from_tables(tables)


class _Usage(Exception):
    pass


# -- subcommands ---------------------------------------------------------------

def cmd_sections(args):
    _write(format_sections(load_elf(args.binary)), None)


def cmd_vtables(args):
    _, tables, handler = _binary_tables(args.binary, args.pure_virtual_addr)
    groups, orphans = group_vtables(tables)
    for t in orphans:
        log.warning("secondary table %#x has no primary", t.address)
    _write(format_groups(groups), None)
    if args.output:
        _write(dump_vtables(tables, handler), args.output)


def cmd_ingest(args):
    tables, handler, facts = _binary_facts(args.binary, args.pure_virtual_addr, args.cfg_order)
    _write(dump_facts(facts), args.output)
    if args.vtables_out:
        _write(dump_vtables(tables, handler), args.vtables_out)


def cmd_classify(args):
    from .ctor_dtor import classify_functions
    facts, classes = _inputs(args)
    _write(format_classification(classify_functions(facts, classes)), args.output)


def cmd_ola(args):
    facts, classes = _inputs(args)
    _write(ola.format_profiles(ola.derive_profiles(classes, facts)), args.output)


def cmd_analyze(args):
    facts, classes = _inputs(args)
    result = cht.analyze(facts, classes, mode=args.mode, alg2_literal=args.alg2_literal)
    for key, why in result.graph.vetoed:
        log.info("vetoed %#x->%#x: %s", key[0], key[1], why)
    for p in result.graph.unoriented:
        log.info("unoriented %#x/%#x in %#x", p.earlier, p.later, p.function)
    _write(cht.emit(result.graph, args.format), args.output)


def cmd_eval(args):
    with open(args.cht, encoding="utf-8") as fh:
        try:
            graph = cht.load_cht_json(fh.read())
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"bad CHT JSON: {exc}") from None
    gt = load_ground_truth(args.gt)
    report = score(graph, gt, args.restrict_to_found)
    text = report.format()
    if args.falses:
        text += format_falses(*falses_report(graph, gt, restrict_to_found=args.restrict_to_found))
    _write(text, args.output)


def cmd_gen(args):
    cfg = GenConfig(classes=args.classes, single=args.single, multiple=args.multiple,
                    composition=args.composition, inlining=args.inlining, ctor_elision=args.ctor_elision,
                    dtor_elision=args.dtor_elision, vtable_elision=args.vtable_elision, seed=args.seed)
    corpus = generate_corpus(cfg)
    facts = dump_facts(corpus.facts)
    if args.output is None:
        _write(facts, None)
        return
    _write(facts, args.output + ".facts")
    _write(dump_vtables(corpus.tables, corpus.pure_handler), args.output + ".vt")
    _write(corpus.ground_truth.dumps(), args.output + ".gt.json")


# -- parser ----------------------------------------------------------------------

def _add_source(p):
    p.add_argument("binary", nargs="?", help="ELF64 binary (alternative to --facts/--vtables)")
    p.add_argument("--facts", help="facts file")
    p.add_argument("--vtables", help="VTable file written by 'vtables -o' or 'ingest --vtables-out'")
    p.add_argument("--cfg-order", action="store_true", help="join register state over the CFG when ingesting")
    p.add_argument("--pure-virtual-addr", type=_hex, help="address of the pure-virtual handler")
    p.add_argument("-o", "--output", help="output path (default stdout)")


def build_parser():
    parser = _Parser(prog="declassify", description="Recover C++ class hierarchies from optimized binaries.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more diagnostics on stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    sub.required = True
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("sections", help="list ELF sections")
    p.add_argument("binary")
    p.set_defaults(func=cmd_sections)

    p = sub.add_parser("vtables", help="extract and group VTables")
    p.add_argument("binary")
    p.add_argument("--pure-virtual-addr", type=_hex)
    p.add_argument("-o", "--output", help="also write the tables in the reloadable T format")
    p.set_defaults(func=cmd_vtables)

    p = sub.add_parser("ingest", help="disassemble a binary into facts")
    p.add_argument("binary")
    p.add_argument("-o", "--output")
    p.add_argument("--vtables-out", help="write the extracted tables alongside")
    p.add_argument("--cfg-order", action="store_true")
    p.add_argument("--pure-virtual-addr", type=_hex)
    p.set_defaults(func=cmd_ingest)

    for name, func, text in (("classify", cmd_classify, "classify functions"),
                             ("ola", cmd_ola, "dump object layout profiles")):
        p = sub.add_parser(name, help=text)
        _add_source(p)
        p.set_defaults(func=func)

    p = sub.add_parser("analyze", help="recover the class hierarchy")
    _add_source(p)
    p.add_argument("--format", choices=("dot", "json"), default="dot")
    p.add_argument("--mode", choices=cht.MODES, default="full")
    p.add_argument("--alg2-literal", action="store_true", help="destructor analysis over calls before COI")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("eval", help="score a hierarchy against ground truth")
    p.add_argument("--cht", required=True, help="JSON written by 'analyze --format json'")
    p.add_argument("--gt", required=True, help="ground-truth JSON")
    p.add_argument("--restrict-to-found", action="store_true")
    p.add_argument("--falses", action="store_true", help="append a categorized list of wrong and missed edges")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    d = GenConfig()
    p.add_argument("--classes", type=int, default=d.classes)
    p.add_argument("--seed", type=_hex, default=DEFAULT_SEED)
    for flag in ("single", "multiple", "composition", "inlining", "ctor_elision", "dtor_elision",
                 "vtable_elision"):
        p.add_argument("--" + flag.replace("_", "-"), type=float, default=getattr(d, flag))
    p.add_argument("-o", "--output", help="path prefix for .facts, .vt and .gt.json (default: facts to stdout)")
    p.set_defaults(func=cmd_gen)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"declassify: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"declassify: {exc}", file=sys.stderr)
        return InputError.exit_code
    except DeclassifyError as exc:
        print(f"declassify: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyError as exc:
        print(f"declassify: unknown class {exc}", file=sys.stderr)
        return InputError.exit_code
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
