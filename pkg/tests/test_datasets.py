"""
Dataset And Report File Tests
"""

import numpy as np
import pytest

from concept_guard.errors import ArtifactParseError
from concept_guard.schemas import ScoreRecord
from concept_guard.trainer import EpochStat, Label, PromptRecord
from concept_guard.utils.datasets import read_concepts, read_dataset, write_dataset
from concept_guard.utils.reports import (
    read_json_lines, read_training_log, write_json_lines, write_training_log,
)


class TestDatasetFiles:

    def test_round_trip_keeps_full_precision(self, tmp_path, toy_spec):
        records = [
            PromptRecord('a', np.array([0.1, 1 / 3, -2e-17]), Label.MALICIOUS, 'nudity'),
            PromptRecord('b', np.array([1.0, 0.0, 0.5]), Label.BENIGN),
        ]
        write_dataset(records, tmp_path / 'd.tsv', tmp_path / 'c.tsv')
        loaded = read_dataset(tmp_path / 'd.tsv', tmp_path / 'c.tsv')
        assert [r.prompt_id for r in loaded] == ['a', 'b']
        assert [r.label for r in loaded] == [Label.MALICIOUS, Label.BENIGN]
        assert [r.concept for r in loaded] == ['nudity', None]
        np.testing.assert_array_equal(loaded[0].raw_embedding, records[0].raw_embedding)
        assert (tmp_path / 'c.tsv').read_text() == 'a\tnudity\n'

    @pytest.mark.parametrize('content,line', [
        ('a\t0\t1 2\nb\t2\t1 2\n', 2),
        ('a\t0\t1 2\nb\t1\t1 2 3\n', 2),
        ('a\t0\t1 2\na\t1\t1 2\n', 2),
        ('a\t0\t1 x\n', 1),
        ('a\t0\t1 2\nb\t1\t1 nan\n', 2),
    ])
    def test_errors_name_the_line(self, tmp_path, content, line):
        path = tmp_path / 'bad.tsv'
        path.write_text(content)
        with pytest.raises(ArtifactParseError) as exc:
            read_dataset(path)
        assert exc.value.line_number == line

    def test_missing_field(self, tmp_path):
        path = tmp_path / 'short.tsv'
        path.write_text('a\t0\t1 2\nb\t1\n')
        with pytest.raises(ArtifactParseError):
            read_dataset(path)

    def test_duplicate_concept_ids(self, tmp_path):
        path = tmp_path / 'c.tsv'
        path.write_text('a\tnudity\na\tgore\n')
        with pytest.raises(ArtifactParseError):
            read_concepts(path)

    def test_ids_with_tabs_are_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_dataset([PromptRecord('a\tb', np.ones(2), Label.BENIGN)], tmp_path / 'd.tsv')


class TestReports:

    def test_training_log(self, tmp_path):
        write_training_log([EpochStat(1, 0.5), EpochStat(2, 0.25)], tmp_path / 'log.csv')
        frame = read_training_log(tmp_path / 'log.csv')
        assert frame['epoch'].tolist() == [1, 2]
        assert frame['mean_loss'].tolist() == [0.5, 0.25]

    def test_untrained_run_is_header_only(self, tmp_path):
        write_training_log([], tmp_path / 'log.csv')
        assert (tmp_path / 'log.csv').read_text() == 'epoch,mean_loss\n'

    def test_json_lines(self, tmp_path):
        rows = [
            ScoreRecord(prompt_id='p', s=0.5, d_mal=0.1, d_ben=0.2, route='benign'),
            {'prompt_id': 'q', 's': 0.0},
        ]
        assert write_json_lines(rows, tmp_path / 'rows.jsonl') == 2
        loaded = read_json_lines(tmp_path / 'rows.jsonl')
        assert loaded[0]['route'] == 'benign'
        assert loaded[1] == {'prompt_id': 'q', 's': 0.0}
