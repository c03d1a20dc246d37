"""End-to-end CLI runs over a small synthetic corpus.

One module-scoped pipeline run feeds the artifact, record, and funnel
assertions; rerun, resume, and determinism checks build fresh working
directories from the same manifest. The full-size determinism and timing
criteria live in the acceptance suite; this module pins behaviour at a
corpus size small enough to keep every test under a second.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from mmforge.cli import main
from mmforge.model import InterleavedSample, PairRecord, PipelineConfig, validate_sample
from mmforge.stages import PIPELINE_ORDER, StageContext, run_pipeline, stage_is_current

from conftest import ImageServer, build_corpus

MANIFESTS = (
    "01_segmented.jsonl",
    "02_images.jsonl",
    "03_deduped.jsonl",
    "04_scored.jsonl",
    "05_samples.jsonl",
    "06_pairs.jsonl",
)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tree_digests(workdir: Path) -> dict[str, str]:
    """Digests of the run outputs that must be reproducible (manifests, funnels)."""
    out = {name: _digest(workdir / name) for name in MANIFESTS}
    for path in sorted((workdir / "funnels").glob("*.json")):
        out[f"funnels/{path.name}"] = _digest(path)
    return out


class PipelineRun:
    def __init__(self, tmp: Path):
        self.server = ImageServer()
        self.manifest, self.docs = build_corpus(self.server, tmp, n_docs=30, seed=7)
        self.config_path = tmp / "config.json"
        self.config_path.write_text(json.dumps({"fetch_rate_per_host": 1000.0}))
        self.cfg = PipelineConfig(fetch_rate_per_host=1000.0)
        self.workdir = tmp / "run1"
        rc = main(self.run_args(self.workdir))
        assert rc == 0

    def run_args(self, workdir: Path) -> list[str]:
        return [
            "--stage",
            "all",
            "--config",
            str(self.config_path),
            "--input",
            str(self.manifest),
            "--output",
            str(workdir),
        ]


@pytest.fixture(scope="module")
def run(tmp_path_factory) -> PipelineRun:
    r = PipelineRun(tmp_path_factory.mktemp("pipeline"))
    yield r
    r.server.close()


def _funnel(run: PipelineRun, stage: str) -> dict:
    return json.loads((run.workdir / "funnels" / f"{stage}.json").read_text())


class TestArtifacts:
    def test_all_manifests_written(self, run):
        for name in MANIFESTS:
            assert (run.workdir / name).is_file(), name

    def test_funnel_and_sidecar_per_stage(self, run):
        for stage in PIPELINE_ORDER:
            assert (run.workdir / "funnels" / f"{stage}.json").is_file()
            assert (run.workdir / "meta" / f"{stage}.meta.json").is_file()

    def test_fetched_blobs_stored_by_digest(self, run):
        blobs = list((run.workdir / "blobs").iterdir())
        assert blobs
        for blob in blobs:
            assert hashlib.sha256(blob.read_bytes()).hexdigest() == blob.name


class TestEmittedRecords:
    def test_samples_satisfy_every_invariant(self, run):
        lines = (run.workdir / "05_samples.jsonl").read_text().splitlines()
        assert lines
        for line in lines:
            sample = InterleavedSample.model_validate_json(line)
            assert validate_sample(sample, run.cfg) == []

    def test_pairs_match_wire_schema(self, run):
        lines = (run.workdir / "06_pairs.jsonl").read_text().splitlines()
        assert lines
        for line in lines:
            rec = PairRecord.model_validate_json(line)
            assert rec.alt.strip() == rec.alt
            assert -1.0 <= rec.score_a <= 1.0
            assert -1.0 <= rec.score_b <= 1.0


class TestFunnels:
    def test_planted_url_filters_counted(self, run):
        fetch = _funnel(run, "fetch")
        assert fetch["rejections"] == {"bad_extension": 1, "blocked_keyword": 1}
        assert fetch["input_count"] - fetch["output_count"] == 2

    def test_planted_duplicates_counted(self, run):
        dedup = _funnel(run, "dedup")
        assert dedup["info"]["cross_removed"] == 12
        assert dedup["info"]["intra_removed"] >= 2
        assert dedup["info"]["refs_unfetched"] == 2

    def test_document_chain_telescopes(self, run):
        chain = ["segment", "dedup", "score", "assign"]
        for prev, nxt in zip(chain, chain[1:]):
            assert _funnel(run, prev)["output_count"] == _funnel(run, nxt)["input_count"]

    def test_stats_command_checks_telescoping(self, run, capsys):
        assert main(["--stage", "stats", "--output", str(run.workdir)]) == 0
        merged = json.loads(capsys.readouterr().out)
        assert merged["ok"] is True
        assert [s["stage"] for s in merged["stages"]] == list(PIPELINE_ORDER)
        assert all(c["ok"] for c in merged["telescoping"])
        assert (run.workdir / "stats.json").is_file()


class TestRerunAndResume:
    def test_second_run_skips_everything(self, run, capsys):
        before = _tree_digests(run.workdir)
        assert main(run.run_args(run.workdir)) == 0
        out = capsys.readouterr().out
        assert "ran nothing" in out
        assert _tree_digests(run.workdir) == before

    def test_fresh_run_is_byte_identical(self, run, tmp_path):
        workdir = tmp_path / "run2"
        assert main(run.run_args(workdir)) == 0
        assert _tree_digests(workdir) == _tree_digests(run.workdir)

    def test_deleted_output_reruns_only_its_stage(self, run, tmp_path):
        workdir = tmp_path / "run3"
        assert main(run.run_args(workdir)) == 0
        (workdir / "05_samples.jsonl").unlink()
        ctx = StageContext(workdir, run.cfg)
        assert run_pipeline(ctx, run.manifest) == ["assign"]
        assert _tree_digests(workdir) == _tree_digests(run.workdir)

    def test_seed_change_invalidates_stages(self, run):
        current = StageContext(run.workdir, run.cfg)
        reseeded = StageContext(run.workdir, run.cfg, seed=1)
        assert stage_is_current(current, "segment", [run.manifest])
        assert not stage_is_current(reseeded, "segment", [run.manifest])

    def test_config_change_invalidates_stages(self, run):
        changed = StageContext(run.workdir, PipelineConfig(fetch_rate_per_host=1000.0, sim_min=0.5))
        assert not stage_is_current(changed, "segment", [run.manifest])

    def test_stage_by_stage_matches_single_invocation(self, run, tmp_path):
        workdir = tmp_path / "run4"
        common = ["--config", str(run.config_path), "--output", str(workdir)]
        assert main(["--stage", "segment", "--input", str(run.manifest), *common]) == 0
        for stage in ("fetch", "dedup", "score", "assign", "pairs"):
            assert main(["--stage", stage, *common]) == 0
        assert _tree_digests(workdir) == _tree_digests(run.workdir)


class TestCliErrors:
    def test_missing_input_for_full_run(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["--stage", "all", "--output", str(tmp_path / "w")])
        assert exc.value.code == 2

    def test_missing_output(self, run):
        with pytest.raises(SystemExit) as exc:
            main(["--stage", "all", "--input", str(run.manifest)])
        assert exc.value.code == 2

    def test_nonexistent_input(self, tmp_path):
        rc = main(["--input", str(tmp_path / "absent.jsonl"), "--output", str(tmp_path / "w")])
        assert rc == 2

    def test_unknown_config_key(self, run, tmp_path):
        bad = tmp_path / "config.json"
        bad.write_text('{"fetch_rate_per_hosts": 1.0}')
        rc = main(
            ["--stage", "all", "--config", str(bad), "--input", str(run.manifest), "--output", str(tmp_path / "w")]
        )
        assert rc == 2

    def test_malformed_config_json(self, run, tmp_path):
        bad = tmp_path / "config.json"
        bad.write_text("{not json")
        rc = main(
            ["--stage", "all", "--config", str(bad), "--input", str(run.manifest), "--output", str(tmp_path / "w")]
        )
        assert rc == 2

    def test_seed_out_of_range(self, run, tmp_path):
        rc = main(
            ["--stage", "all", "--seed", str(1 << 64), "--input", str(run.manifest), "--output", str(tmp_path / "w")]
        )
        assert rc == 2

    def test_stage_without_predecessors(self, tmp_path, capsys):
        rc = main(["--stage", "dedup", "--output", str(tmp_path / "empty")])
        assert rc == 1
        assert "run earlier stages first" in capsys.readouterr().err


class TestRougeCommand:
    def test_scores_rows_and_reports_errors(self, tmp_path, capsys):
        rows = tmp_path / "rows.jsonl"
        rows.write_text(
            "\n".join(
                [
                    json.dumps({"candidate": "ABCDE", "reference": "ACE"}),
                    json.dumps({"candidate": "車は白色です。", "reference": "車は白色です。"}),
                    json.dumps({"candidate": "only one side"}),
                ]
            )
            + "\n"
        )
        report = tmp_path / "report.jsonl"
        assert main(["--stage", "rouge", "--input", str(rows), "--output", str(report)]) == 0
        assert "scored 2 rows" in capsys.readouterr().out

        out = [json.loads(line) for line in report.read_text().splitlines()]
        assert out[0]["f"] == pytest.approx(0.75)
        assert out[1]["f"] == pytest.approx(1.0)
        assert "error" in out[2]
        assert out[3]["rows"] == 2
        assert out[3]["mean_f"] == pytest.approx((0.75 + 1.0) / 2)
