"""Tests for the `lab` CLI group."""
import json

import openpyxl
import pandas as pd
import pytest

SMALL = ['--grid', '6', '--hotspot', '1', '1', '--hotspot', '4', '4', '-d', '1', '--seed', '3']


def _run(cli_runner, *args):
    return cli_runner.invoke(args=['lab', *args])


class TestGenerators:
    def test_gen_catalog(self, cli_runner, tmp_path):
        out = tmp_path / 'catalog.csv'
        result = _run(cli_runner, 'gen-catalog', '--grid', '3', '--out', str(out))
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(out)
        assert list(frame.columns) == ['id', 'x0', 'x1']
        assert len(frame) == 9

    def test_gen_trace_writes_metadata(self, cli_runner, tmp_path):
        out = tmp_path / 'trace.csv'
        result = _run(cli_runner, 'gen-trace', *SMALL, '--r', '500', '--out', str(out), '--timestamps')
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(out)
        assert list(frame.columns) == ['id', 'timestamp']
        assert len(frame) == 500
        metadata = json.loads((tmp_path / 'trace.csv.json').read_text())
        assert metadata['seed'] == 3
        assert metadata['n_items'] == 36
        assert metadata['reproducibility']['run_id'].startswith('gen-trace-')


class TestPredict:
    def test_report_per_capacity(self, cli_runner, tmp_path):
        trace_csv = tmp_path / 'iterations.csv'
        result = _run(cli_runner, 'predict', *SMALL, '-C', '4', '-C', '8', '--trace-csv', str(trace_csv))
        assert result.exit_code == 0, result.output
        payload = json.loads(result.stdout)
        assert [r['C'] for r in payload['reports']] == [4.0, 8.0]
        assert payload['reports'][0]['H'] < payload['reports'][1]['H']
        assert payload['reports'][0]['step_norms'][0] is None
        assert set(payload['reproducibility']) == {'run_id', 'seeds', 'config_hash', 'artifact_version'}
        iterations = pd.read_csv(trace_csv)
        assert set(iterations['C']) == {4.0, 8.0}

    def test_config_file_and_flag_override(self, cli_runner, tmp_path):
        config = tmp_path / 'experiment.toml'
        config.write_text('[experiment]\ngrid_side = 6\nhotspots = [[1, 1]]\ncapacities = [4]\nbeta = 0.3\n')
        out = tmp_path / 'report.json'
        result = _run(cli_runner, 'predict', '--config', str(config), '--beta', '0.2', '--out', str(out))
        assert result.exit_code == 0, result.output
        payload = json.loads(out.read_text())
        assert payload['reports'][0]['beta'] == 0.2

    def test_validation_error_exits_one(self, cli_runner):
        result = _run(cli_runner, 'predict', *SMALL, '-C', '40')
        assert result.exit_code == 1
        error = json.loads(result.output.strip().splitlines()[-1])
        assert error['error'] == 'ValidationError'

    def test_state_distribution(self, cli_runner):
        result = _run(cli_runner, 'predict', '--grid', '3', '--hotspot', '1', '1', '-d', '1', '-C', '2', '--states')
        assert result.exit_code == 0, result.output
        states = json.loads(result.stdout)['reports'][0]['state_distribution']
        assert sum(states.values()) == pytest.approx(1.0)
        assert len(states) <= 2 ** 9

    def test_state_distribution_budget(self, cli_runner):
        result = _run(cli_runner, 'predict', *SMALL, '-C', '4', '--states')
        assert result.exit_code == 1
        assert 'BudgetExceededError' in result.output

    def test_unknown_preset_is_a_usage_error(self, cli_runner):
        result = _run(cli_runner, 'predict', '--preset', 'nope')
        assert result.exit_code == 2


class TestSimulateAndCompare:
    def test_simulate_csv(self, cli_runner, tmp_path):
        csv_path = tmp_path / 'simulate.csv'
        result = _run(cli_runner, 'simulate', *SMALL, '-C', '4', '--r', '1000', '--repetitions', '2',
                      '--policy', 'sim_lru', '--csv', str(csv_path))
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(csv_path)
        assert frame.loc[0, 'policy'] == 'sim_lru'
        assert frame.loc[0, 'seed_count'] == 2
        assert json.loads(result.stdout)['reproducibility']['seeds'] == [3, 4]

    def test_ttl_policy(self, cli_runner):
        result = _run(cli_runner, 'simulate', *SMALL, '-C', '4', '--r', '1000', '--repetitions', '1',
                      '--policy', 'ttl', '--timer', '5')
        assert result.exit_code == 0, result.output
        assert 0.0 < json.loads(result.stdout)['rows'][0]['hit_rate'] < 1.0

    def test_compare_outputs(self, cli_runner, tmp_path):
        csv_path = tmp_path / 'compare.csv'
        xlsx_path = tmp_path / 'compare.xlsx'
        dump_csv = tmp_path / 'occupancy.csv'
        result = _run(cli_runner, 'compare', *SMALL, '-C', '4', '--r', '1000', '--repetitions', '2',
                      '--method', 'exp_rnd', '--method', 'ours_rnd', '--method', 'lru',
                      '--csv', str(csv_path), '--xlsx', str(xlsx_path),
                      '--occupancy-dump', '4', '--dump-csv', str(dump_csv))
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(csv_path)
        assert list(frame.columns) == ['method', 'C', 'hit_rate', 'ci95', 'seed_count']
        assert frame['method'].tolist() == ['exp_rnd', 'ours_rnd', 'lru']
        workbook = openpyxl.load_workbook(xlsx_path)
        assert workbook.sheetnames == ['Metadata', 'compare', 'occupancy']
        assert len(pd.read_csv(dump_csv)) == 36

    def test_greedy_with_table_is_rejected(self, cli_runner, tmp_path):
        table = tmp_path / 'q.csv'
        table.write_text('server,requester,q\n1,0,0.5\n')
        result = _run(cli_runner, 'compare', *SMALL, '-C', '4', '--q-rule', 'table', '--q-table', str(table),
                      '--method', 'greedy')
        assert result.exit_code == 1
        assert 'ConfigMismatchError' in result.output


class TestDiagnostics:
    def test_analyze_jacobian(self, cli_runner, tmp_path):
        csv_path = tmp_path / 'norms.csv'
        result = _run(cli_runner, 'analyze-jacobian', *SMALL, '-C', '4', '-C', '8', '--csv', str(csv_path))
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(csv_path)
        assert list(frame.columns) == ['C', 'beta', 'spectral', 'one', 'infinity']
        assert len(frame) == 2

    def test_tune_beta(self, cli_runner):
        result = _run(cli_runner, 'tune-beta', *SMALL, '-C', '4', '--samples', '3')
        assert result.exit_code == 0, result.output
        tuning = json.loads(result.stdout)['tuning'][0]
        assert 0.0 <= tuning['beta'] < 1.0
        assert len(tuning['samples']) + tuning['skipped'] == 3

    @pytest.mark.parametrize('mode', ['exact', 'heuristic'])
    def test_check_cover(self, cli_runner, mode):
        result = _run(cli_runner, 'check-cover', '--grid', '3', '-d', '1', '-C', '2', '--mode', mode)
        assert result.exit_code == 0, result.output
        row = json.loads(result.stdout)['cover'][0]
        assert row['mode'] == mode
        assert row['status'] in ('holds', 'fails', 'unknown')

    def test_exact_cover_budget(self, cli_runner):
        result = _run(cli_runner, 'check-cover', '--grid', '6', '-d', '1', '-C', '4', '--mode', 'exact')
        assert result.exit_code == 1
        assert 'BudgetExceededError' in result.output
