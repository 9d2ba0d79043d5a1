"""
End-to-end tests of the command line
"""

import pandas as pd
import pytest
from PIL import Image

import cli
from gradcheck import CHECKS
from tensor_autodiff import Tensor, record_op, reduce_sum


def run(*argv) -> int:
    return cli.main([str(arg) for arg in argv])


@pytest.fixture(scope='module')
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp('data')
    assert run('synth-data', '--out', out, '--samples', 4, '--frames', 5, '--seed', 0, '--profile', 'tiny') == 0
    return out


@pytest.fixture(scope='module')
def trained(dataset_dir, tmp_path_factory):
    """pretrain-warp then a one-epoch f3warp run at the tiny profile"""
    root = tmp_path_factory.mktemp('run')
    warp_path = root / 'warp.wsrc'
    assert run('pretrain-warp', '--data', dataset_dir, '--out', warp_path, '--profile', 'tiny',
               '--epochs', 1) == 0

    config_path = root / 'run.yaml'
    config_path.write_text(
        "profile: tiny\nvariant: f3warp\nframes: 3\nloss_mode: pixel\nlr: 1.0e-4\n"
        f"epochs: 1\nbatch_size: 2\nseed: 0\npretrained_warp: {warp_path}\n",
        encoding='utf-8')
    out_dir = root / 'out'
    assert run('train', '--config', config_path, '--data', dataset_dir, '--out', out_dir) == 0
    return out_dir


class TestSynthData:
    """synth-data"""

    def test_files(self, dataset_dir):
        assert len(list((dataset_dir / 'lr').glob('*.png'))) == 20
        assert len(list((dataset_dir / 'hr').glob('*.png'))) == 4
        with Image.open(dataset_dir / 'hr' / 's00000.png') as img:
            assert img.size == (32, 32)

    def test_prints_manifest_path(self, tmp_path, capsys):
        assert run('synth-data', '--out', tmp_path, '--samples', 1, '--frames', 1, '--profile', 'tiny') == 0
        assert capsys.readouterr().out.strip().endswith('manifest.tsv')

    def test_even_frames(self, tmp_path):
        assert run('synth-data', '--out', tmp_path, '--samples', 1, '--frames', 4) == 1


class TestDefaultProfile:
    """synth-data and pretrain-warp agree when neither names a profile"""

    def test_pretrain_on_default_data(self, tmp_path):
        data = tmp_path / 'data'
        assert run('synth-data', '--out', data, '--samples', 2, '--frames', 3) == 0
        with Image.open(data / 'hr' / 's00000.png') as img:
            assert img.size == (32, 32)
        assert run('pretrain-warp', '--data', data, '--out', tmp_path / 'warp.wsrc', '--epochs', 1) == 0
        assert (tmp_path / 'warp.wsrc').exists()

    def test_profile_mismatch_is_a_usage_error(self, tmp_path):
        data = tmp_path / 'data'
        assert run('synth-data', '--out', data, '--samples', 1, '--frames', 3, '--profile', 'micro') == 0
        assert run('pretrain-warp', '--data', data, '--out', tmp_path / 'warp.wsrc', '--epochs', 1) == 1
        assert not (tmp_path / 'warp.wsrc').exists()


class TestTrainInferEval:
    """train -> infer -> eval"""

    def test_train_outputs(self, trained):
        assert (trained / 'final.wsrc').exists()
        history = pd.read_csv(trained / 'history.csv')
        assert history['epoch'].tolist() == [1]

    def test_infer(self, trained, dataset_dir, tmp_path, capsys):
        out = tmp_path / 'rec.png'
        assert run('infer', '--ckpt', trained / 'final.wsrc', '--data', dataset_dir,
                   '--seq-id', 's00001', '--out', out) == 0
        assert capsys.readouterr().out.strip() == str(out)
        with Image.open(out) as img:
            assert img.size == (32, 32) and img.mode == 'RGB'

    def test_infer_unknown_sample(self, trained, dataset_dir, tmp_path):
        assert run('infer', '--ckpt', trained / 'final.wsrc', '--data', dataset_dir,
                   '--seq-id', 'missing', '--out', tmp_path / 'x.png') == 1

    def test_eval_with_baselines(self, trained, dataset_dir, tmp_path):
        report = tmp_path / 'report.csv'
        assert run('eval', '--ckpt', trained / 'final.wsrc', '--data', dataset_dir,
                   '--report', report, '--baselines') == 0
        frame = pd.read_csv(report, keep_default_na=False)
        assert frame['variant'].tolist() == ['f3warp', 'gt', 'bicubic']
        assert frame.loc[1, 'psnr_db'] == 'n/a'

    def test_eval_needs_something_to_evaluate(self, dataset_dir, tmp_path):
        assert run('eval', '--data', dataset_dir, '--report', tmp_path / 'r.csv') == 1

    def test_resume(self, trained, dataset_dir, tmp_path):
        config_path = tmp_path / 'more.yaml'
        config_path.write_text("profile: tiny\nvariant: f3warp\nloss_mode: pixel\nlr: 1.0e-4\n"
                               "epochs: 2\nbatch_size: 2\nseed: 0\n", encoding='utf-8')
        assert run('train', '--config', config_path, '--data', dataset_dir, '--out', tmp_path / 'out',
                   '--resume', trained / 'final.wsrc') == 0
        assert pd.read_csv(tmp_path / 'out' / 'history.csv')['epoch'].tolist() == [2]


class TestExitCodes:
    """Error taxonomy"""

    def test_no_command(self):
        assert run() == 1

    def test_unknown_flag(self):
        assert run('gradcheck', '--bogus') == 1

    def test_missing_config(self, dataset_dir, tmp_path):
        assert run('train', '--config', tmp_path / 'absent.yaml', '--data', dataset_dir,
                   '--out', tmp_path) == 1

    def test_corrupt_checkpoint(self, dataset_dir, tmp_path):
        bad = tmp_path / 'bad.wsrc'
        bad.write_bytes(b'WSRC\x01')
        assert run('infer', '--ckpt', bad, '--data', dataset_dir, '--seq-id', 's00000',
                   '--out', tmp_path / 'x.png') == 2

    def test_missing_dataset(self, tmp_path):
        assert run('eval', '--data', tmp_path / 'nothing', '--report', tmp_path / 'r.csv', '--baselines') == 2


class TestCompareCommand:
    """compare"""

    def test_writes_results(self, tmp_path, capsys):
        out = tmp_path / 'compare.csv'
        config_path = tmp_path / 'run.yaml'
        config_path.write_text("profile: micro\nloss_mode: pixel\nlr: 1.0e-3\nbatch_size: 2\n", encoding='utf-8')
        assert run('compare', '--config', config_path, '--out', out, '--train-samples', 2,
                   '--heldout-samples', 1, '--frames', 3, '--epochs', 1, '--pretrain-epochs', 1,
                   '--seeds', 0) == 0
        assert capsys.readouterr().out.strip() == str(out)
        results = pd.read_csv(out)
        assert results['variant'].tolist() == ['f1', 'f3', 'f3warp']

    def test_even_frames(self, tmp_path):
        assert run('compare', '--out', tmp_path / 'c.csv', '--frames', 4, '--seeds', 0) == 1


class TestGradcheckCommand:
    """gradcheck"""

    def test_single_module(self, capsys):
        assert run('gradcheck', '--module', 'tps_warp') == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert {line.split('\t')[0] for line in lines} == {'tps_warp'}
        assert all(line.endswith('ok') for line in lines)

    def test_unknown_module(self):
        assert run('gradcheck', '--module', 'nope') == 1

    def test_broken_op_fails(self, monkeypatch, capsys):
        def broken(rng):
            x = Tensor(rng.normal(size=4), requires_grad=True)
            return (lambda: reduce_sum(record_op(3.0 * x.data, (x,), 'triple', lambda g: (g,)))), [x], 1e-6

        monkeypatch.setitem(CHECKS, 'broken', {'triple': broken})
        assert run('gradcheck', '--module', 'broken') == 4
        out = capsys.readouterr().out
        assert 'triple' in out and 'FAILED' in out
