from hypothesis import settings

from acceptance_log import summary_lines

settings.register_profile("repo", deadline=None)
settings.load_profile("repo")


def pytest_terminal_summary(terminalreporter):
    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
