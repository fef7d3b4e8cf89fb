"""Shared pytest wiring for the test suite."""

_capture_manager = None


def pytest_configure(config):
    global _capture_manager
    _capture_manager = config.pluginmanager.getplugin("capturemanager")


def emit(line: str) -> None:
    """Print a line to the real terminal, bypassing pytest's capture."""
    if _capture_manager is not None:
        with _capture_manager.global_and_fixture_disabled():
            print(line, flush=True)
    else:
        print(line, flush=True)
