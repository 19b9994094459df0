import numpy as np
import pytest

from mstn.config import BiLSTMConfig, MstnConfig, TransformerConfig


def tiny_config(core="transformer", task="classify", precision=64, variant="Full", **kw):
    """Narrow widths so finite differences over every coordinate stay cheap."""
    base = dict(input_dim=3, seq_len=8, core=core, conv_channels=(6, 4),
                transformer=TransformerConfig(layers=2, heads=2, model_dim=4, ffn_dim=8),
                bilstm=BiLSTMConfig(layers=2, hidden_per_dir=2), se_reduction=2, mhta_heads=2,
                task=task, num_classes=3, horizon=4, head_rank=2, precision=precision, variant=variant)
    base.update(kw)
    return MstnConfig(**base).validate()


def jitter(model, scale=0.1, seed=0):
    """Move every parameter off its init (zero biases, unit gammas) so no
    gradient is trivially zero."""
    r = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = (p.data + scale * r.standard_normal(p.shape)).astype(p.data.dtype)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["transformer", "bilstm"])
def core(request):
    return request.param


ACCEPTANCE = {}


def acceptance_line(number, name, ok, detail):
    """Record one criterion outcome for the terminal summary."""
    ACCEPTANCE.setdefault(number, []).append(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        for line in ACCEPTANCE[number]:
            terminalreporter.write_line(line)
