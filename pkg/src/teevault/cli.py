"""Command-line front end.

`vault serve` hosts the lab: one process holding the simulated onion
network, the configured vault, and the REST API. The provider and
client subcommands are thin HTTP clients against that process, so
separate invocations all act on the same running world.

Two subcommands stay local on purpose. `provider build-hp` only turns
a config into bytes and a digest, and `bench run` is a long-running
measurement that builds its own vaults; neither has a server role.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import sys
from pathlib import Path

import httpx

from . import __version__, bench, tee, vault
from .client import PinStore
from .errors import TeevaultError
from .hp_config import build_hp_bytes, default_config
from .provider import Advertisement

DEFAULT_SERVER = os.environ.get("TEEVAULT_SERVER", "http://127.0.0.1:8700")

_INT_KEYS = {"ram_limit_bytes", "disk_limit_bytes", "submission_cap_bytes"}
_FLOAT_KEYS = {
    "bandwidth_bytes_per_sec",
    "bandwidth_burst_bytes",
    "backup_interval_seconds",
}
_BOOL_KEYS = {"record_traffic"}


def load_vault_config(path) -> vault.VaultConfig:
    """Accept either JSON or flat key=value lines for the same fields."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return vault.VaultConfig.from_json(text)
    data = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise TeevaultError(f"{path}:{lineno}: expected key=value")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key in _INT_KEYS:
            value = int(raw)
        elif key in _FLOAT_KEYS:
            value = None if raw.lower() in ("", "none") else float(raw)
        elif key in _BOOL_KEYS:
            value = raw.lower() in ("1", "true", "yes")
        elif key == "allowed_capabilities":
            value = tuple(part.strip() for part in raw.split(",") if part.strip())
        else:
            value = raw or None
        data[key] = value
    unknown = set(data) - set(vault.VaultConfig.__dataclass_fields__)
    if unknown:
        raise TeevaultError(f"unknown vault config keys: {sorted(unknown)}")
    return vault.VaultConfig(**data)


def _http(server: str) -> httpx.Client:
    return httpx.Client(base_url=server, timeout=120.0)


def _check(resp) -> dict:
    """Unwrap a lab response or exit with its error body."""
    if resp.status_code >= 400:
        try:
            body = resp.json()
        except ValueError:
            body = {"error": f"HTTP {resp.status_code}", "detail": resp.text}
        print(json.dumps(body), file=sys.stderr)
        raise SystemExit(1)
    if resp.status_code == 204:
        return {}
    return resp.json()


def _read_circuit(path) -> dict | None:
    if path is None:
        return None
    spec = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(spec, dict):
        raise TeevaultError("circuit profile must be a JSON object")
    return spec


def _resolve_vault(client: httpx.Client, wanted: str) -> str:
    """--vault accepts the lab id or the VCHS onion address."""
    for info in _check(client.get("/vaults")):
        if wanted in (info["vault_id"], info["vchs_onion"]):
            return info["vault_id"]
    print(f"no vault known as {wanted!r} on this server", file=sys.stderr)
    raise SystemExit(1)


def _write_uptime_log(client: httpx.Client, provider_id: str, path):
    info = _check(client.get(f"/providers/{provider_id}"))
    lines = [
        json.dumps({"start": start, "end": end})
        for start, end in info["uptime_log"]
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _collect_content(root) -> dict:
    root = Path(root)
    if not root.is_dir():
        raise TeevaultError(f"{root} is not a directory")
    content = {}
    for file in sorted(root.rglob("*")):
        if file.is_file():
            rel = file.relative_to(root).as_posix()
            content[rel] = base64.b64encode(file.read_bytes()).decode("ascii")
    return content


# --- vault ---------------------------------------------------------------


def cmd_vault_serve(args) -> int:
    import uvicorn

    from .service.app import Lab, create_app

    config = load_vault_config(args.config)
    host, _, port = args.listen.rpartition(":")
    lab = Lab()
    daemon = vault.VaultDaemon(config, lab.registry)
    vchs = daemon.advertise_vchs()
    vault_id = lab.next_id("vault")
    lab.vaults[vault_id] = daemon
    print(
        json.dumps(
            {
                "vault_id": vault_id,
                "vchs_onion": vchs,
                "attestation_public_key": daemon.attestation_public_key.hex(),
                "api": f"http://{host}:{port}",
            }
        ),
        flush=True,
    )
    try:
        uvicorn.run(create_app(lab), host=host, port=int(port), log_level="warning")
    finally:
        lab.close()
    return 0


# --- provider ------------------------------------------------------------


def _secret(args) -> str:
    if args.secret is not None:
        return args.secret
    if args.secret_file is not None:
        return Path(args.secret_file).read_text(encoding="utf-8").strip()
    print("one of --secret or --secret-file is required", file=sys.stderr)
    raise SystemExit(1)


def cmd_provider_build_hp(args) -> int:
    config = default_config(
        _secret(args).encode("utf-8"),
        bind_port=args.port,
        max_staleness_seconds=args.staleness,
        capabilities=tuple(args.capabilities.split(",")),
    )
    hp = build_hp_bytes(config)
    if args.out:
        Path(args.out).write_bytes(hp)
    print(json.dumps({"measurement": tee.measure(hp).hex, "size_bytes": len(hp)}))
    return 0


def cmd_provider_bootstrap(args) -> int:
    with _http(args.server) as client:
        vault_id = _resolve_vault(client, args.vault)
        created = _check(
            client.post(
                "/providers",
                json={
                    "auth_secret": _secret(args),
                    "vault_id": vault_id,
                    "attest": not args.no_attest,
                    "bind_port": args.port,
                    "max_staleness_seconds": args.staleness,
                    "capabilities": args.capabilities.split(","),
                },
            )
        )
        provider_id = created["provider_id"]
        body = {"content": _collect_content(args.content)}
        circuit = _read_circuit(args.profile)
        if circuit is not None:
            body["circuit"] = circuit
        ad = _check(client.post(f"/providers/{provider_id}/bootstrap", json=body))
        if args.pin_file:
            pins = PinStore.load(args.pin_file)
            pins.import_advertisement(Advertisement(**ad), replace=True)
            pins.save(args.pin_file)
        if args.uptime_log:
            _write_uptime_log(client, provider_id, args.uptime_log)
    print(f"provider: {provider_id}", file=sys.stderr)
    print(json.dumps({"onion_url": ad["onion_url"], "cert_hash": ad["cert_hash"]}))
    return 0


class _ChangeAction(argparse.Action):
    """Collect --add/--remove into one ordered change list."""

    def __call__(self, parser, namespace, value, option_string=None):
        changes = getattr(namespace, "changes", None) or []
        if option_string == "--add":
            path, sep, file = value.partition("=")
            if not sep or not path or not file:
                parser.error("--add expects <path>=<file>")
            data = base64.b64encode(Path(file).read_bytes()).decode("ascii")
            changes.append({"action": "upload", "path": path, "data": data})
        else:
            changes.append({"action": "remove", "path": value})
        namespace.changes = changes


def cmd_provider_update(args) -> int:
    if not getattr(args, "changes", None):
        print("nothing to do: pass --add and/or --remove", file=sys.stderr)
        return 1
    body = {"changes": args.changes}
    circuit = _read_circuit(args.profile)
    if circuit is not None:
        body["circuit"] = circuit
    with _http(args.server) as client:
        receipt = _check(client.post(f"/providers/{args.provider}/update", json=body))
        if args.uptime_log:
            _write_uptime_log(client, args.provider, args.uptime_log)
    print(json.dumps(receipt))
    return 0


def cmd_provider_export_keys(args) -> int:
    with _http(args.server) as client:
        receipt = _check(client.post(f"/providers/{args.provider}/export-keys"))
        if args.uptime_log:
            _write_uptime_log(client, args.provider, args.uptime_log)
    bundle = base64.b64decode(receipt["bundle"])
    if args.out:
        Path(args.out).write_bytes(bundle)
    else:
        sys.stdout.write(bundle.decode("utf-8") + "\n")
    return 0


def cmd_provider_import_keys(args) -> int:
    bundle = Path(args.bundle).read_bytes()
    body = {"bundle": base64.b64encode(bundle).decode("ascii")}
    circuit = _read_circuit(args.profile)
    if circuit is not None:
        body["circuit"] = circuit
    with _http(args.server) as client:
        receipt = _check(
            client.post(f"/providers/{args.provider}/import-keys", json=body)
        )
        if args.uptime_log:
            _write_uptime_log(client, args.provider, args.uptime_log)
        if args.pin_file:
            pins = PinStore.load(args.pin_file)
            pins.import_advertisement(Advertisement(**receipt), replace=True)
            pins.save(args.pin_file)
    print(json.dumps(receipt))
    return 0


# --- client ----------------------------------------------------------------


def cmd_client_fetch(args) -> int:
    pins = PinStore.load(args.pin_file)
    pin = pins.get(args.url)
    if pin is None:
        print(f"no pin for {args.url} in {args.pin_file}", file=sys.stderr)
        return 1
    body = {"url": args.url, "path": args.path, "pin_cert_hash": pin.hex()}
    circuit = _read_circuit(args.profile)
    if circuit is not None:
        body["circuit"] = circuit
    with _http(args.server) as client:
        result = _check(client.post("/fetch", json=body))
    if args.out:
        Path(args.out).write_bytes(base64.b64decode(result["body"]))
    print(
        json.dumps(
            {
                "status": result["status"],
                "ttfb_ms": result["ttfb_ms"],
                "ttlb_ms": result["ttlb_ms"],
                "stale": result["stale"],
                "body_sha256": result["body_sha256"],
            }
        )
    )
    return 0


# --- bench -----------------------------------------------------------------


def cmd_bench_run(args) -> int:
    if args.plan:
        plan = bench.BenchPlan.from_json(Path(args.plan).read_text(encoding="utf-8"))
    else:
        plan = bench.BenchPlan()
    report = bench.run_pair(
        plan,
        out_dir=args.out,
        progress=lambda msg: print(msg, file=sys.stderr),
    )
    print(bench.format_summary(report))
    print(f"outputs written to {args.out}", file=sys.stderr)
    return 0


# --- wiring ------------------------------------------------------------------


def _add_server(parser):
    parser.add_argument(
        "--server",
        default=DEFAULT_SERVER,
        help=f"lab API base URL (default {DEFAULT_SERVER})",
    )


def _add_provider_common(parser):
    _add_server(parser)
    parser.add_argument("--profile", help="circuit profile JSON file")
    parser.add_argument("--uptime-log", help="write intervals here, one JSON per line")


def _add_hp_options(parser):
    parser.add_argument("--secret", help="provider auth secret")
    parser.add_argument("--secret-file", help="file holding the auth secret")
    parser.add_argument("--port", type=int, default=8080)
    parser.add_argument("--staleness", type=int, default=7 * 86400)
    parser.add_argument(
        "--capabilities",
        default="key_import,listen,quote,seal",
        help="comma-separated capability list",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="teevault", description="anonymous hosting lab"
    )
    parser.add_argument("--version", action="version", version=__version__)
    top = parser.add_subparsers(dest="group", required=True)

    vault_p = top.add_parser("vault", help="run a vault")
    vault_sub = vault_p.add_subparsers(dest="command", required=True)
    serve = vault_sub.add_parser("serve", help="serve a vault plus the lab API")
    serve.add_argument("--config", required=True, help="VaultConfig JSON or key=value file")
    serve.add_argument("--listen", default="127.0.0.1:8700", help="host:port for the API")
    serve.set_defaults(fn=cmd_vault_serve)

    prov = top.add_parser("provider", help="provider operations")
    prov_sub = prov.add_subparsers(dest="command", required=True)

    build = prov_sub.add_parser("build-hp", help="build host program bytes locally")
    _add_hp_options(build)
    build.add_argument("--out", help="write the program bytes here")
    build.set_defaults(fn=cmd_provider_build_hp)

    boot = prov_sub.add_parser("bootstrap", help="submit, attest, and upload content")
    _add_hp_options(boot)
    _add_provider_common(boot)
    boot.add_argument("--vault", required=True, help="vault id or VCHS onion address")
    boot.add_argument("--content", required=True, help="directory to upload")
    boot.add_argument("--no-attest", action="store_true", help="skip quote verification")
    boot.add_argument("--pin-file", help="record the advertisement pin here")
    boot.set_defaults(fn=cmd_provider_bootstrap)

    update = prov_sub.add_parser("update", help="apply content changes")
    _add_provider_common(update)
    update.add_argument("--provider", required=True, help="provider id from bootstrap")
    update.add_argument("--add", action=_ChangeAction, metavar="PATH=FILE")
    update.add_argument("--remove", action=_ChangeAction, metavar="PATH")
    update.set_defaults(fn=cmd_provider_update)

    export = prov_sub.add_parser("export-keys", help="download the service key bundle")
    _add_provider_common(export)
    export.add_argument("--provider", required=True)
    export.add_argument("--out", help="write the bundle here instead of stdout")
    export.set_defaults(fn=cmd_provider_export_keys)

    imp = prov_sub.add_parser("import-keys", help="install an exported key bundle")
    _add_provider_common(imp)
    imp.add_argument("--provider", required=True)
    imp.add_argument("--bundle", required=True, help="bundle file from export-keys")
    imp.add_argument("--pin-file", help="update this pin file with the new identity")
    imp.set_defaults(fn=cmd_provider_import_keys)

    cli = top.add_parser("client", help="client operations")
    cli_sub = cli.add_subparsers(dest="command", required=True)
    fetch = cli_sub.add_parser("fetch", help="fetch one path from a pinned service")
    _add_server(fetch)
    fetch.add_argument("--url", required=True, help="onion address")
    fetch.add_argument("--path", required=True, help="content path")
    fetch.add_argument("--pin-file", required=True, help="JSON pin store")
    fetch.add_argument("--profile", help="circuit profile JSON file")
    fetch.add_argument("--out", help="save the body here")
    fetch.set_defaults(fn=cmd_client_fetch)

    bench_p = top.add_parser("bench", help="benchmark")
    bench_sub = bench_p.add_subparsers(dest="command", required=True)
    run = bench_sub.add_parser("run", help="run the vanilla-vs-enclave grid")
    run.add_argument("--plan", help="BenchPlan JSON file (defaults when omitted)")
    run.add_argument("--out", required=True, help="output directory")
    run.set_defaults(fn=cmd_bench_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TeevaultError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except httpx.HTTPError as exc:
        print(f"cannot reach lab server: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
