import numpy as np
import pytest

from lshg.hourglass import NetworkConfig

# filled by test_acceptance, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    """Direct nested-loop cross-correlation, used as an independent oracle."""
    n, cin, h, wd = x.shape
    cout, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    per_group = cout // groups
    for b_ in range(n):
        for o in range(cout):
            g = o // per_group
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cg):
                        for p in range(k):
                            for q in range(k):
                                acc += w[o, c, p, q] * xp[b_, g * cg + c, i * stride + p * dilation,
                                                          j * stride + q * dilation]
                    out[b_, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def tiny_config(**kw):
    base = dict(num_stacks=1, variant="original", hg_depth=1, stem_channels=(8, 16), hg_channels=16,
                input_res=32, heatmap_res=8)
    base.update(kw)
    return NetworkConfig(**base)


PCKH_GROUPS = {"Head": (8, 9), "Shoulder": (12, 13), "Elbow": (11, 14), "Wrist": (10, 15),
               "Hip": (2, 3), "Knee": (1, 4), "Ankle": (0, 5)}


def pckh_recount(preds, anns, thr=0.5):
    """Plain-loop PCKh, written independently of lshg.evaluation."""
    hit = {g: 0 for g in PCKH_GROUPS}
    tot = {g: 0 for g in PCKH_GROUPS}
    for pred, ann in zip(preds, anns):
        x1, y1, x2, y2 = ann.head_box
        size = 0.6 * ((x2 - x1) ** 2 + (y2 - y1) ** 2) ** 0.5
        for g, idx in PCKH_GROUPS.items():
            for j in idx:
                if ann.joints[j, 2] <= 0:
                    continue
                dx = pred[j][0] - ann.joints[j][0]
                dy = pred[j][1] - ann.joints[j][1]
                tot[g] += 1
                if (dx * dx + dy * dy) ** 0.5 <= thr * size:
                    hit[g] += 1
    scores = {g: 100.0 * hit[g] / tot[g] for g in PCKH_GROUPS}
    return scores, sum(scores.values()) / 7
