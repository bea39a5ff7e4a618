"""Unit tests for run manifests."""

import hashlib

import pytest

from src.utils.manifest import MANIFEST_NAME, file_sha256, package_versions, read_manifest, write_manifest


@pytest.mark.unit
class TestManifest:
    """Test manifest content and hashing."""

    def test_file_hash(self, tmp_path):
        path = tmp_path / 'a.csv'
        path.write_bytes(b'x,y\n1,2\n')
        assert file_sha256(path) == hashlib.sha256(b'x,y\n1,2\n').hexdigest()

    def test_write_and_read(self, tmp_path):
        """Test files are listed relative to the output directory and sorted."""
        (tmp_path / 'draws').mkdir()
        b = tmp_path / 'draws' / 'b.csv'
        a = tmp_path / 'a.csv'
        b.write_text('b')
        a.write_text('a')

        write_manifest(tmp_path, 'develop', {'seed': 7}, 'abc', 7,
                       [b, a, tmp_path / 'missing.csv', tmp_path / MANIFEST_NAME],
                       extra={'prior_scale': 1.0})
        manifest = read_manifest(tmp_path)

        assert list(manifest['files']) == ['a.csv', 'draws/b.csv']
        assert manifest['files']['a.csv'] == file_sha256(a)
        assert manifest['command'] == 'develop'
        assert manifest['config_hash'] == 'abc'
        assert manifest['prior_scale'] == 1.0
        assert 'numpy' in manifest['versions']

    def test_reruns_list_identical_hashes(self, tmp_path):
        path = tmp_path / 'scores.csv'
        path.write_text('lpd\n-1.0\n')
        first = write_manifest(tmp_path, 'backtest', {}, 'h', 0, [path])
        files_first = read_manifest(tmp_path)['files']
        write_manifest(tmp_path, 'backtest', {}, 'h', 0, [path, first])
        assert read_manifest(tmp_path)['files'] == files_first

    def test_versions(self):
        versions = package_versions()
        assert versions['python']
        assert set(versions) >= {'numpy', 'scipy', 'pandas'}
