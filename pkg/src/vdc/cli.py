"""``vdc`` command line: operator front end to the catalog server.

Exit codes: 0 success, 1 rejected request or bad input, 2 server unreachable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Any

from . import errors
from .client import Client, ServerUnreachable

EXIT_OK, EXIT_INVALID, EXIT_UNREACHABLE = 0, 1, 2


class UsageError(Exception):
    pass


def _load(path: str) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


def _table(rows: list[list[Any]], header: list[str]) -> str:
    cells = [header] + [[("" if c is None else str(c)) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _kv(doc: dict) -> str:
    width = max((len(k) for k in doc), default=0)
    return "\n".join(
        f"{k.ljust(width)}  {json.dumps(v) if isinstance(v, (dict, list)) else v}" for k, v in doc.items()
    )


def _client(args) -> Client:
    url = args.server or os.environ.get("VDC_SERVER")
    if not url:
        raise ServerUnreachable("(unset)", "no server URL; pass --server or set VDC_SERVER")
    return Client(url)


# each handler returns (json_document, human_text)

def cmd_tx_add(args):
    out = _client(args).add_transformation(_load(args.file))
    return out, f"registered {out['name']} v{out['version']} body_hash={out['body_hash']}"


def cmd_tx_show(args):
    tx = _client(args).get_transformation(args.name, args.version)
    rows = [[e["name"], e["domain"], e["type"], "yes" if e["required"] else "no",
             json.dumps(e["default"]) if "default" in e else ""] for e in tx["schema"]]
    text = (
        f"{tx['name']} v{tx['version']}  step={tx['step']}  body_hash={tx['body_hash']}\n"
        f"inputs: {', '.join(i['slot'] + '<-' + i['step'] for i in tx['inputs']) or '-'}\n\n"
        + _table(rows, ["PARAM", "DOMAIN", "TYPE", "REQUIRED", "DEFAULT"])
        + "\n\n" + tx["template"]
    )
    return tx, text


def cmd_recipe_add(args):
    out = _client(args).add_recipe(_load(args.file))
    return out, f"registered recipe {out['name']}"


def cmd_recipe_validate(args):
    out = _client(args).validate_recipe(args.name, args.note)
    return out, f"recipe {out['name']} validated"


def cmd_site_bind(args):
    out = _client(args).bind_site(args.site, args.recipe)
    return out, f"site {out['site']} -> recipe {out['recipe']}"


def cmd_dataset_compose(args):
    out = _client(args).compose(_load(args.file))
    ds = out["dataset"]
    return out, f"composed {ds['name']} v{ds['version']}: {out['created']} new derivations, {out['linked']} linked"


def cmd_dataset_status(args):
    ders = _client(args).dataset_derivations(args.name, args.version)
    counts: dict[str, int] = {}
    for d in ders:
        counts[d["state"]] = counts.get(d["state"], 0) + 1
    rows = [[d["partition"], d["state"], d["attempts"], d["id"], d["output_id"]] for d in ders]
    summary = ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
    return {"derivations": ders, "states": counts}, _table(rows, ["PART", "STATE", "TRIES", "DERIVATION", "OUTPUT"]) + f"\n\n{summary}"


def cmd_run_gc(args):
    requeued = _client(args).gc()
    return {"requeued": requeued}, f"re-queued {len(requeued)} derivations" + "".join(f"\n  {r}" for r in requeued)


def cmd_materialize(args):
    plan = _client(args).materialize(args.object_id)
    lines = [f"target {plan['target']}"]
    for k, stage in enumerate(plan["stages"]):
        lines.append(f"stage {k}: " + ", ".join(stage))
    lines.append("pruned: " + (", ".join(plan["pruned"]) or "-"))
    return plan, "\n".join(lines)


def cmd_reprocess(args):
    out = _client(args).reprocess(args.dataset, args.recipe)
    ds = out["dataset"]
    text = (
        f"{ds['name']} v{ds['version']}: {out['invalidated']} invalidated, {out['reused']} reused\n"
        + "new versions: " + ", ".join(f"{v['name']} v{v['version']}" for v in out["versions"])
    )
    return out, text


def cmd_provenance(args):
    prov = _client(args).provenance(args.derivation_id)
    return prov, _kv(prov)


def cmd_status(args):
    st = _client(args).status()
    return st, _kv(st)


def cmd_simulate(args):
    from .simnet import SimConfig, run_simulation

    config = SimConfig.load(args.config)
    # an explicit --server drives a remote server; otherwise one runs in-process
    report = run_simulation(config, Client(args.server) if args.server else None)
    return report.to_json(), report.table()


def cmd_serve(args):
    from .planner import PlannerConfig
    from .server import ServerConfig, serve

    cfg = ServerConfig.from_json(_load(args.config)) if args.config else ServerConfig()
    if args.host is not None:
        cfg.host = args.host
    if args.port is not None:
        cfg.port = args.port
    if args.journal is not None:
        cfg.journal = args.journal
    if args.no_fsync:
        cfg.fsync = False
    if args.no_gc:
        cfg.background_gc = False
    if args.claim_timeout is not None or args.gc_period is not None or args.max_attempts is not None:
        p = cfg.planner
        cfg.planner = PlannerConfig(
            args.claim_timeout if args.claim_timeout is not None else p.claim_timeout,
            args.max_attempts if args.max_attempts is not None else p.max_attempts,
            args.gc_period if args.gc_period is not None else p.gc_period,
        )
    serve(cfg, ready=lambda url: print(f"listening on {url}", file=sys.stderr, flush=True))
    return None, ""


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--server", default=argparse.SUPPRESS, help="server URL (default: $VDC_SERVER)")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable output")

    p = argparse.ArgumentParser(prog="vdc", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    tx = sub.add_parser("tx", help="transformations").add_subparsers(dest="action", required=True)
    s = tx.add_parser("add", parents=[common]); s.add_argument("file"); s.set_defaults(fn=cmd_tx_add)
    s = tx.add_parser("show", parents=[common]); s.add_argument("name"); s.add_argument("version", type=int)
    s.set_defaults(fn=cmd_tx_show)

    rc = sub.add_parser("recipe", help="recipes").add_subparsers(dest="action", required=True)
    s = rc.add_parser("add", parents=[common]); s.add_argument("file"); s.set_defaults(fn=cmd_recipe_add)
    s = rc.add_parser("validate", parents=[common]); s.add_argument("name"); s.add_argument("--note")
    s.set_defaults(fn=cmd_recipe_validate)

    st = sub.add_parser("site", help="site recipe bindings").add_subparsers(dest="action", required=True)
    s = st.add_parser("bind", parents=[common]); s.add_argument("site"); s.add_argument("recipe")
    s.set_defaults(fn=cmd_site_bind)

    ds = sub.add_parser("dataset", help="datasets").add_subparsers(dest="action", required=True)
    s = ds.add_parser("compose", parents=[common]); s.add_argument("file"); s.set_defaults(fn=cmd_dataset_compose)
    s = ds.add_parser("status", parents=[common]); s.add_argument("name"); s.add_argument("version", type=int)
    s.set_defaults(fn=cmd_dataset_status)

    run = sub.add_parser("run", help="production control").add_subparsers(dest="action", required=True)
    s = run.add_parser("gc", parents=[common]); s.set_defaults(fn=cmd_run_gc)

    s = sub.add_parser("materialize", parents=[common]); s.add_argument("object_id"); s.set_defaults(fn=cmd_materialize)
    s = sub.add_parser("reprocess", parents=[common]); s.add_argument("dataset"); s.add_argument("--recipe", required=True)
    s.set_defaults(fn=cmd_reprocess)
    s = sub.add_parser("provenance", parents=[common]); s.add_argument("derivation_id"); s.set_defaults(fn=cmd_provenance)
    s = sub.add_parser("simulate", parents=[common]); s.add_argument("config"); s.set_defaults(fn=cmd_simulate)
    s = sub.add_parser("status", parents=[common]); s.set_defaults(fn=cmd_status)

    s = sub.add_parser("serve", parents=[common], help="run the catalog server")
    s.add_argument("--host"); s.add_argument("--port", type=int); s.add_argument("--journal")
    s.add_argument("--config", help="ServerConfig JSON file")
    s.add_argument("--claim-timeout", type=float); s.add_argument("--gc-period", type=float)
    s.add_argument("--max-attempts", type=int)
    s.add_argument("--no-gc", action="store_true", help="disable the background gc sweep")
    s.add_argument("--no-fsync", action="store_true")
    s.set_defaults(fn=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    args.server = getattr(args, "server", None)
    args.json = getattr(args, "json", False)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        doc, text = args.fn(args)
    except ServerUnreachable as exc:
        _report(args, {"error": "ServerUnreachable", "message": str(exc), "url": exc.url})
        return EXIT_UNREACHABLE
    except errors.VDCError as exc:
        _report(args, exc.to_json())
        return EXIT_INVALID
    except UsageError as exc:
        _report(args, {"error": "UsageError", "message": str(exc)})
        return EXIT_INVALID
    if args.json:
        print(json.dumps(doc, indent=2, ensure_ascii=False))
    elif text:
        print(text)
    return EXIT_OK


def _report(args, body: dict) -> None:
    if args.json:
        print(json.dumps(body, indent=2))
    print(f"error: {body['error']}: {body['message']}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
