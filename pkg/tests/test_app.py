import logging

import pytest

import app
import sentry_init
import utils


def test_env_int(monkeypatch):
    monkeypatch.setenv('VERIFY_TEST_INT', '7')
    assert utils.env_int('VERIFY_TEST_INT', 3) == 7
    monkeypatch.setenv('VERIFY_TEST_INT', 'seven')
    assert utils.env_int('VERIFY_TEST_INT', 3) == 3
    monkeypatch.delenv('VERIFY_TEST_INT')
    assert utils.env_int('VERIFY_TEST_INT', 3) == 3


def test_log_event_keeps_whitelisted_tags(caplog):
    log = logging.getLogger('test.events')
    with caplog.at_level(logging.INFO, logger='test.events'):
        utils.log_event(log, 'solved', K=3, status='optimal', matrix=[[1, 2], [3, 4]])
    msg = caplog.records[-1].getMessage()
    assert "'K': 3" in msg and "'status': 'optimal'" in msg
    assert 'matrix' not in msg


def test_stopwatch():
    with utils.Stopwatch() as sw:
        sum(range(1000))
    assert sw.seconds >= 0.0


def test_main_without_sentry(monkeypatch, tmp_path):
    monkeypatch.delenv('SENTRY_DSN', raising=False)
    monkeypatch.setenv('LOG_LEVEL', 'WARNING')
    path = tmp_path / 'exp.json'
    path.write_text('{"generator": "identity", "verify": {"kmax": 1}}', encoding='utf-8')
    assert app.main(['sample', '--config', str(path), '--samples', '5']) == 0


def test_missing_config_file_exits_with_config_code(tmp_path):
    assert app.main(['verify', '--config', str(tmp_path / 'nope.json')]) == 1


def test_subcommand_required():
    with pytest.raises(SystemExit):
        app.main([])


class FakeSentry:
    def __init__(self):
        self.tags = {}
        self.crumbs = []

    def set_tag(self, key, value):
        self.tags[key] = value

    def add_breadcrumb(self, **kwargs):
        self.crumbs.append(kwargs)


def test_sentry_helpers_are_noops_without_sdk(monkeypatch):
    monkeypatch.setattr(sentry_init, 'sentry_sdk', None)
    monkeypatch.setenv('SENTRY_DSN', 'https://key@example.invalid/1')
    assert sentry_init.init_sentry() is False
    sentry_init.tag_run(family='f', K=1)
    sentry_init.record_bound(1, 0.5, 0.5)
    sentry_init.capture_failure(RuntimeError('x'), stage='solve')


def test_tag_run_keeps_run_tags_only(monkeypatch):
    fake = FakeSentry()
    monkeypatch.setattr(sentry_init, 'sentry_sdk', fake)
    sentry_init.tag_run(family='lasso', K=3, stage=None, secret='D matrix')
    sentry_init.record_bound(3, 0.25, 0.3)
    assert fake.tags == {'family': 'lasso', 'K': 3}
    assert fake.crumbs[0]['data'] == {'delta': 0.25, 'best_bound': 0.3}


def test_strip_request_drops_large_extras():
    event = {'request': {'url': 'x'}, 'extra': {'bounds': list(range(100)), 'K': 2}}
    out = sentry_init._strip_request(event, None)
    assert 'request' not in out
    assert out['extra'] == {'K': 2}
