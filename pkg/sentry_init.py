"""Optional Sentry error reporting for verification runs (no-ops unless SENTRY_DSN is set)."""
import os
from typing import Optional

try:
    import sentry_sdk
    from sentry_sdk.integrations.logging import LoggingIntegration
except Exception:
    sentry_sdk = None

# keys attached to every event; anything else stays out of Sentry
RUN_TAGS = ('family', 'K', 'stage', 'command', 'milp_backend')


def _strip_request(event, hint):
    # matrices and models never leave the process
    event.pop('request', None)
    extra = event.get('extra') or {}
    for key in [k for k, v in extra.items() if isinstance(v, (list, dict)) and len(v) > 32]:
        extra.pop(key)
    return event


def init_sentry() -> bool:
    """Initialize Sentry if SENTRY_DSN present. Returns True if initialized."""
    dsn = os.getenv('SENTRY_DSN')
    if not dsn or not sentry_sdk:
        return False

    logging_integration = LoggingIntegration(level=None, event_level=None)
    try:
        sentry_sdk.init(
            dsn=dsn,
            integrations=[logging_integration],
            traces_sample_rate=float(os.getenv('SENTRY_TRACES', '0.0')),
            environment=os.getenv('ENVIRONMENT', 'dev'),
            release=os.getenv('RELEASE', 'local'),
            send_default_pii=False,
            before_send=_strip_request,
        )
        sentry_sdk.set_tag('milp_backend', os.getenv('VERIFY_MILP_BACKEND', 'highs'))
        return True
    except Exception:
        return False


def tag_run(**tags) -> None:
    """Set whitelisted run tags (family, K, stage, command) on the current scope."""
    if not sentry_sdk:
        return
    for key, value in tags.items():
        if key in RUN_TAGS and value is not None:
            try:
                sentry_sdk.set_tag(key, value)
            except Exception:
                pass


def record_bound(K: int, delta: float, best_bound: float) -> None:
    """Breadcrumb per solved K so a later failure shows how far the run got."""
    if not sentry_sdk:
        return
    try:
        sentry_sdk.add_breadcrumb(category='verify', message='K=%d solved' % K, level='info',
                                  data={'delta': float(delta), 'best_bound': float(best_bound)})
    except Exception:
        pass


def capture_failure(exc: Exception, stage: Optional[str] = None, K: Optional[int] = None) -> None:
    if not sentry_sdk:
        return
    try:
        with sentry_sdk.push_scope() as scope:
            if stage:
                scope.set_tag('stage', stage)
            if K is not None:
                scope.set_tag('K', K)
            sentry_sdk.capture_exception(exc)
    except Exception:
        pass
