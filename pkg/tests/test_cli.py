"""
Command Line Tests
End-to-end subcommand flow, reproducibility and exit codes
"""

import json
from pathlib import Path

import pytest

from concept_guard.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from concept_guard.utils.reports import read_json_lines

TOY_CONFIG = Path(__file__).resolve().parents[1] / 'config' / 'toy.cfg'

TRAINING = [
    '--set', 'n_per_class=20',
    '--set', 'epochs=5',
    '--set', 'lr=0.01',
    '--set', 'cls_epochs=100',
    '--set', 'cls_lr=0.5',
]


@pytest.fixture(autouse=True)
def testing_environment(monkeypatch):
    monkeypatch.setenv('CONCEPT_GUARD_ENV', 'testing')


def _artifacts(out):
    return [
        '--set', f'projection={out / "projection.mlp"}',
        '--set', f'bank={out / "bank.tsv"}',
        '--set', f'classifier={out / "classifier.mlp"}',
        '--set', f'concepts={out / "concepts.tsv"}',
        '--out-dir', str(out),
    ]


def _train_and_sanitize(out, seed=5):
    dataset = str(out / 'dataset.tsv')
    common = TRAINING + _artifacts(out) + ['--seed', str(seed)]
    assert main(['gen-toy-data'] + common) == EXIT_OK
    for command in ('train-proj', 'build-bank', 'train-cls', 'score', 'sanitize'):
        assert main([command, '--in', dataset] + common) == EXIT_OK, command


@pytest.fixture(scope='module')
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp('run')
    mp = pytest.MonkeyPatch()
    mp.setenv('CONCEPT_GUARD_ENV', 'testing')
    try:
        _train_and_sanitize(out)
    finally:
        mp.undo()
    return out


class TestFlow:

    def test_outputs_exist(self, trained_run):
        for name in ('dataset.tsv', 'concepts.tsv', 'projection.mlp', 'projection_log.csv',
                     'bank.tsv', 'bank.tsv.src', 'classifier.mlp', 'classifier_log.csv',
                     'scores.jsonl', 'decisions.jsonl', 'manifest.json'):
            assert (trained_run / name).is_file(), name

    def test_scores_cover_every_prompt(self, trained_run):
        rows = [json.loads(line) for line in (trained_run / 'scores.jsonl').read_text().splitlines()]
        assert len(rows) == 40
        assert set(rows[0]) == {'prompt_id', 's', 'd_mal', 'd_ben', 'route'}
        assert all(0.0 <= row['s'] <= 1.0 for row in rows)

    def test_every_prompt_gets_an_image_and_decision(self, trained_run):
        decisions = [json.loads(line)
                     for line in (trained_run / 'decisions.jsonl').read_text().splitlines()]
        assert len(decisions) == 40
        for row in decisions:
            assert (trained_run / row['image']).read_bytes()[:2] == b'P5'
            assert json.loads((trained_run / f"{row['prompt_id']}.json").read_text()) == row
            if row['route'] == 'unsafe_path':
                assert (trained_run / row['mask']).is_file()
                assert row['t_star'] >= 1
            else:
                assert row['mask'] is None

    def test_manifest_records_the_last_command(self, trained_run):
        manifest = json.loads((trained_run / 'manifest.json').read_text())
        assert manifest['command'] == 'sanitize'
        assert manifest['seeds']['seed'] == 5
        assert manifest['config']['cls_lr'] == 0.5
        assert manifest['inputs']['bank']['digest'].startswith('sha256:')

    def test_reruns_are_byte_identical(self, trained_run, tmp_path):
        _train_and_sanitize(tmp_path)
        names = ['dataset.tsv', 'projection.mlp', 'bank.tsv', 'classifier.mlp', 'scores.jsonl',
                 'decisions.jsonl']
        names += sorted(p.name for p in trained_run.glob('*.pgm'))
        for name in names:
            assert (tmp_path / name).read_bytes() == (trained_run / name).read_bytes(), name

        first = json.loads((trained_run / 'manifest.json').read_text())
        second = json.loads((tmp_path / 'manifest.json').read_text())
        assert first['seeds'] == second['seeds']
        for section in ('inputs', 'outputs'):
            digests = [{role: e.get('digest') for role, e in m[section].items()} for m in (first, second)]
            assert digests[0] == digests[1], section

    def test_eval_sweep(self, trained_run):
        args = ['eval-sweep', '--in', str(trained_run / 'dataset.tsv'), '--set', 'values=0.05,0.5',
                '--seed', '5'] + _artifacts(trained_run)
        assert main(args) == EXIT_OK
        lines = (trained_run / 'sweep.csv').read_text().splitlines()
        assert lines[0].startswith('parameter,value,flag_rate,bypass_rate')
        assert len(lines) == 3

    def test_probe_against_the_pairwise_filter(self, trained_run):
        args = ['probe-sim', '--set', 'probe_target=pairwise_filter', '--set', 'probe_runs=3',
                '--out-dir', str(trained_run)]
        assert main(args) == EXIT_OK
        assert (trained_run / 'probe.csv').read_text().startswith('target,runs,successes')

    def test_pipeline_failure_is_reported_as_json(self, trained_run, tmp_path, capsys):
        bad = tmp_path / 'bad.tsv'
        bad.write_text('odd-0000\t0\t1 0 0\n')
        args = ['sanitize', '--in', str(bad)] + _artifacts(trained_run)[:-2] + ['--out-dir', str(tmp_path)]
        assert main(args) == EXIT_DATA
        report = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert report['stage'] == 'score'
        assert report['prompt_id'] == 'odd-0000'


class TestExitCodes:

    def test_unknown_command(self):
        assert main(['transmogrify']) == EXIT_USAGE

    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path):
        assert main(['grad-check', '--set', 'bogus=1', '--out-dir', str(tmp_path)]) == EXIT_USAGE

    def test_bad_seed(self, tmp_path):
        assert main(['grad-check', '--seed', '-1', '--out-dir', str(tmp_path)]) == EXIT_USAGE

    def test_missing_artifact_key(self, tmp_path):
        data = tmp_path / 'd.tsv'
        data.write_text('a\t0\t1 0\n')
        assert main(['score', '--in', str(data), '--out-dir', str(tmp_path)]) == EXIT_USAGE

    def test_missing_dataset_file(self, tmp_path):
        args = ['train-proj', '--in', str(tmp_path / 'absent.tsv'), '--out-dir', str(tmp_path)]
        assert main(args) == EXIT_DATA

    def test_malformed_dataset(self, tmp_path):
        data = tmp_path / 'd.tsv'
        data.write_text('a\t7\t1 0\n')
        assert main(['train-proj', '--in', str(data), '--out-dir', str(tmp_path)]) == EXIT_DATA

    def test_grad_check(self, tmp_path, capsys):
        assert main(['grad-check', '--set', 'trials=2', '--out-dir', str(tmp_path)]) == EXIT_OK
        assert 'max relative error' in capsys.readouterr().out
        assert json.loads((tmp_path / 'manifest.json').read_text())['command'] == 'grad-check'


class TestToyConfig:

    def test_shipped_config_flags_and_redacts_harmful_prompts(self, tmp_path):
        """Training keys come only from config/toy.cfg; artifacts are found in the output dir."""
        run, held = tmp_path / 'run', tmp_path / 'held'
        common = ['--config', str(TOY_CONFIG), '--out-dir', str(run)]
        assert main(['gen-toy-data'] + common) == EXIT_OK
        for command in ('train-proj', 'build-bank', 'train-cls'):
            assert main([command] + common) == EXIT_OK, command

        args = ['gen-toy-data', '--seed', '1', '--set', 'n_per_class=50', '--out-dir', str(held)]
        assert main(args) == EXIT_OK
        heldout = ['--in', str(held / 'dataset.tsv')]

        assert main(['score'] + heldout + common) == EXIT_OK
        routes = {row['prompt_id']: row['route'] for row in read_json_lines(run / 'scores.jsonl')}
        harmful = [pid for pid in routes if pid.startswith('mal-')]
        harmless = [pid for pid in routes if pid.startswith('ben-')]
        assert sum(routes[pid] == 'unsafe_path' for pid in harmful) >= 0.9 * len(harmful)
        assert sum(routes[pid] == 'benign_path' for pid in harmless) >= 0.9 * len(harmless)

        assert main(['sanitize'] + heldout + common) == EXIT_OK
        redacted = [row for row in read_json_lines(run / 'decisions.jsonl') if row['mask'] is not None]
        assert len(redacted) >= 45
        assert sum(row['masked_pixels'] > 0 for row in redacted) >= 0.9 * len(redacted)
