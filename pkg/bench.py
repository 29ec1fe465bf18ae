"""
Benchmark harness: replays one seeded trace against TTL, LRU and AMV-L on a cleared
store each time, then analyzes the telemetry and writes the comparison.

    python bench.py                        # desk scale, all three policies
    python bench.py scale=full seed=7
    python bench.py policies=[amvl] check=true
    python bench.py export_trace=results/trace.ndjson
    python bench.py replay=results/trace.ndjson replay_policy=lru
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import aiohttp
import hydra
from aiohttp import web
from omegaconf import DictConfig, OmegaConf
from rich.console import Console
from tqdm import tqdm

from analysis import (
    AcceptanceResult,
    acceptance_passed,
    check_acceptance,
    compare,
    export_csvs,
    load_telemetry,
    render_tables,
    summarize,
)
from engine import AmvlEngine
from gateway import create_app
from telemetry import TelemetrySink
from utils.config import AppConfig, load_config, parse_policy
from utils.datatypes import POLICY_ORDER, PolicyName, RequestKind, RunReport, WorkloadSpec
from utils.errors import AmvlError, ConfigError
from utils.format import format_metrics_safe, format_ratio_safe, report_headline
from utils.logs import setup_logging
from workload import WorkloadEvent, export_trace, generate, import_trace, label_stats

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_CHECK_FAILED = 2

_PATHS = {RequestKind.WRITE: "/v1/write", RequestKind.RECALL: "/v1/recall", RequestKind.ASK: "/v1/ask"}


class BenchHarness:
    """
    Runs the three-policy protocol for one AppConfig.

    Every policy gets a fresh engine and the same event list, submitted in trace order
    to a worker pool. Telemetry goes to ``<out>/<policy>.ndjson``.
    """

    def __init__(self, app: AppConfig, raw_config: Optional[Mapping[str, Any]] = None):
        self.app = app
        self.raw_config = dict(raw_config) if raw_config is not None else app.model_dump(by_alias=True)
        self.out = app.out
        self.console = Console()
        self.show_progress = sys.stderr.isatty()
        self.reports: Dict[str, RunReport] = {}
        self.acceptance: List[AcceptanceResult] = []
        os.makedirs(self.out, exist_ok=True)

    # trace

    def load_trace(self) -> Tuple[WorkloadSpec, List[WorkloadEvent]]:
        """The generated trace, or the one named by ``replay``"""
        if self.app.replay:
            spec, events = import_trace(self.app.replay)
            if spec is None:
                spec = self.app.workload.spec(self.app.scale, self.app.seed)
            logger.info(f"Replaying {len(events)} events from {self.app.replay}")
        else:
            spec = self.app.workload.spec(self.app.scale, self.app.seed)
            events = list(generate(spec))
            logger.info(f"Generated {len(events)} events ({self.app.scale} scale, seed {spec.seed})")
        if self.app.export_trace:
            export_trace(spec, events, self.app.export_trace)
        logger.info(format_metrics_safe(label_stats(events, spec.high_value_threshold)))
        return spec, events

    def policies(self) -> List[PolicyName]:
        if self.app.replay and self.app.replay_policy:
            return [parse_policy(self.app.replay_policy)]
        chosen = set(self.app.policy_names())
        return [p for p in POLICY_ORDER if p in chosen]

    def ttl_window(self, spec: WorkloadSpec, events: Sequence[WorkloadEvent]) -> float:
        if self.app.policy.ttl_window is not None:
            return self.app.policy.ttl_window
        last = events[-1].t_virtual if events else 0.0
        return last + spec.virtual_tick

    # runs

    def run_policy(self, policy: PolicyName, spec: WorkloadSpec, events: Sequence[WorkloadEvent]) -> str:
        """Replay ``events`` against a fresh engine; returns the telemetry path"""
        path = os.path.join(self.out, f"{policy.value}.ndjson")
        sink = TelemetrySink(path, self.app.telemetry.queue_size)
        engine = AmvlEngine.from_app(
            self.app,
            policy,
            seed=spec.seed,
            ttl_window=self.ttl_window(spec, events),
            telemetry=sink,
        )
        if engine.store.count_live() != 0:
            raise RuntimeError(f"store for {policy.value} is not empty at the start of the run")

        self.console.rule(f"[bold green]{policy.value.upper()} run ({len(events)} events)")
        try:
            if self.app.mode == "http":
                asyncio.run(self._drive_http(engine, events))
            else:
                self._drive_inprocess(engine, events)
        finally:
            stats = engine.close()
            sink.close()
        logger.info(f"{policy.value}: {format_metrics_safe({k: v for k, v in stats.items() if not isinstance(v, dict)})}")
        return path

    def _drive_inprocess(self, engine: AmvlEngine, events: Sequence[WorkloadEvent]) -> None:
        failures = 0
        with ThreadPoolExecutor(max_workers=self.app.workers, thread_name_prefix="bench") as pool:
            futures = [pool.submit(engine.handle, event.to_request()) for event in events]
            for future in tqdm(
                as_completed(futures),
                total=len(futures),
                desc=engine.policy_name.value,
                disable=not self.show_progress,
            ):
                try:
                    future.result()
                except AmvlError:
                    failures += 1
        if failures:
            logger.warning(f"{failures} requests failed with engine errors")

    async def _drive_http(self, engine: AmvlEngine, events: Sequence[WorkloadEvent]) -> None:
        namespaces = sorted({event.namespace for event in events} | {"default"})
        app = create_app(engine, namespaces, self.app.workers)
        # Gateway on an ephemeral port
        runner = web.AppRunner(app, access_log=None)
        await runner.setup()
        site = web.TCPSite(runner, "127.0.0.1", 0)
        await site.start()
        host, port = runner.addresses[0][:2]
        base = f"http://{host}:{port}"
        logger.info(f"Driving {engine.policy_name.value} over HTTP at {base}")

        limit = asyncio.Semaphore(self.app.workers)
        progress = tqdm(total=len(events), desc=engine.policy_name.value, disable=not self.show_progress)
        failures = 0

        async def send(session: aiohttp.ClientSession, event: WorkloadEvent) -> None:
            nonlocal failures
            async with limit:
                async with session.post(base + _PATHS[event.kind], json=_payload(event)) as response:
                    await response.read()
                    if response.status != 200:
                        failures += 1
            progress.update(1)

        try:
            connector = aiohttp.TCPConnector(limit=self.app.workers)
            async with aiohttp.ClientSession(connector=connector) as session:
                tasks = []
                for event in events:
                    tasks.append(asyncio.create_task(send(session, event)))
                    # yield so tasks enter the semaphore in trace order
                    await asyncio.sleep(0)
                await asyncio.gather(*tasks)
        finally:
            progress.close()
            await runner.cleanup()
        if failures:
            logger.warning(f"{failures} HTTP requests returned an error status")

    # analysis

    def analyze(self, paths: Mapping[PolicyName, str], spec: WorkloadSpec) -> None:
        """Per-policy reports and CSVs, then the comparison when two or more runs exist"""
        # Per-policy reports
        for policy, path in paths.items():
            log = load_telemetry(path)
            report = summarize(
                log,
                policy=policy.value,
                prompt_cap_n=self.app.retrieval.prompt_cap_n,
                high_value_threshold=spec.high_value_threshold,
            )
            self.reports[policy.value] = report
            _write_json(os.path.join(self.out, f"report_{policy.value}.json"), report.model_dump(mode="json"))
            export_csvs(log, report, self.out)
            self.console.print(f"[cyan]{policy.value}[/cyan] {format_metrics_safe(report_headline(report))}")

        reference = self.reports.get(PolicyName.TTL.value)
        if reference is not None:
            for name, report in self.reports.items():
                if name != reference.policy:
                    ratios = format_ratio_safe(report_headline(reference), report_headline(report))
                    logger.info(f"{name} vs ttl: {ratios}")

        # Acceptance runs on whatever reports exist
        self.acceptance = check_acceptance(self.reports)
        if len(self.reports) < 2:
            logger.info("Single run; skipping the comparison tables")
            return

        comparison = compare(self.reports)
        comparison.acceptance = [result.model_dump() for result in self.acceptance]
        _write_json(os.path.join(self.out, "comparison.json"), comparison.model_dump(mode="json"))
        tables = render_tables(comparison)
        with open(os.path.join(self.out, "tables.txt"), "w", encoding="utf-8") as f:
            f.write(tables)
        self.console.print(tables)

    def print_acceptance(self) -> None:
        self.console.rule("[bold green]Acceptance")
        for result in self.acceptance:
            if result.passed is None:
                mark = "[yellow]SKIP[/yellow]"
            elif result.passed:
                mark = "[green]PASS[/green]"
            else:
                mark = "[red]FAIL[/red]"
            self.console.print(f"{mark} {result.name}: {result.detail}")

    def run(self) -> int:
        """Execute every selected policy run and the analysis; returns the exit code"""
        # step 1: effective config and trace
        _write_json(os.path.join(self.out, "run_config.json"), self.raw_config)
        try:
            spec, events = self.load_trace()
        except (AmvlError, OSError) as e:
            logger.error(f"Cannot load the trace: {e}")
            return EXIT_RUN_FAILED
        # step 2: one run per policy, TTL first
        paths: Dict[PolicyName, str] = {}
        for policy in self.policies():
            try:
                paths[policy] = self.run_policy(policy, spec, events)
            except Exception:
                logger.exception(f"{policy.value} run failed; aborting the remaining runs")
                return EXIT_RUN_FAILED

        # step 3: reports, comparison tables and acceptance
        try:
            self.analyze(paths, spec)
        except Exception:
            logger.exception("Analysis failed")
            return EXIT_RUN_FAILED

        if self.app.check:
            self.print_acceptance()
            if not acceptance_passed(self.acceptance):
                self.console.print("[red]Acceptance checks failed[/red]")
                return EXIT_CHECK_FAILED
        self.console.print(f"[bold green]Results written to {self.out}[/bold green]")
        return EXIT_OK


def _payload(event: WorkloadEvent) -> Dict[str, Any]:
    text_key = "content" if event.kind is RequestKind.WRITE else "query"
    payload: Dict[str, Any] = {
        "namespace": event.namespace,
        text_key: event.text,
        "t_virtual": event.t_virtual,
        "request_index": event.index,
    }
    if event.label_value is not None:
        payload["label_value"] = event.label_value
    return payload


def _write_json(path: str, data: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=str)


def run_bench(config: DictConfig) -> int:
    """Load and validate ``config``, then run the harness"""
    try:
        app = load_config(config)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_RUN_FAILED
    raw = OmegaConf.to_container(config, resolve=True) if isinstance(config, DictConfig) else dict(config)
    raw.pop("hydra", None)
    return BenchHarness(app, raw).run()


@hydra.main(version_base=None, config_path="configs", config_name="config")
def main(config: DictConfig) -> None:
    setup_logging(config.get("log_level", "INFO"), config.get("log_dir") or "logs", prefix="bench")
    code = run_bench(config)
    if code != EXIT_OK:
        sys.exit(code)


if __name__ == "__main__":
    main()
