import pytest

from stabcert import sysdef


@pytest.fixture(scope="session")
def ex1():
    return sysdef.load("example1")


@pytest.fixture(scope="session")
def ex2():
    return sysdef.load("example2")
