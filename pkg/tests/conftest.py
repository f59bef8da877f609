import pytest

from support import Running, local_client, make_service, seed_recipes


@pytest.fixture
def service():
    svc = make_service(claim_timeout=60, gc_period=30, max_attempts=10)
    yield svc
    svc.close()


@pytest.fixture
def client(service):
    c = local_client(service)
    seed_recipes(c)
    return c


@pytest.fixture
def server():
    r = Running()
    yield r
    r.stop()


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
