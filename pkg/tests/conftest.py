import os

from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from wotcast.coap import REPEATABLE, Code, Message, MsgType, Option, OptionNumber

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=1000, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

REQUEST_CODES = [c for c in Code if c.is_request]
RESPONSE_CODES = [c for c in Code if c.is_response]
CODES = [c for c in Code if c != Code.EMPTY]

tokens = st.binary(max_size=8)
option_values = st.one_of(st.binary(max_size=20), st.binary(min_size=250, max_size=300))


@st.composite
def option_lists(draw, allow_proxy_uri=True):
    numbers = [n for n in OptionNumber if allow_proxy_uri or n != OptionNumber.PROXY_URI]
    opts = []
    for n in draw(st.lists(st.sampled_from(numbers), max_size=8)):
        if n not in REPEATABLE and any(o.number == n for o in opts):
            continue
        opts.append(Option(n, draw(option_values)))
    return tuple(opts)


@st.composite
def messages(draw, codes=CODES):
    code = draw(st.sampled_from(codes))
    opts = draw(option_lists(allow_proxy_uri=code.is_request))
    return Message(
        code,
        draw(st.sampled_from(list(MsgType))),
        draw(st.integers(0, 0xFFFF)),
        draw(tokens),
        opts,
        draw(st.binary(max_size=64)),
    )


segment = st.text(alphabet=st.characters(min_codepoint=33, max_codepoint=0x2FF), min_size=1, max_size=8)


# acceptance verdicts are collected here and echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
