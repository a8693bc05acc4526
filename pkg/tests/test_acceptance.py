"""End-to-end acceptance checks, one test per criterion.

Each test is named test_criterion_<n>_<label>; the conftest terminal hook
prints one `criterion N: PASS/FAIL` line per test in the summary.
"""

import random

import pytest

from conftest import corpus_text, instrument_text, run_text
from prismbox import fuzz
from prismbox.checks import bounds_check_2k
from prismbox.cli import load_corpus, run_corpus_case
from prismbox.heap import AllocError, SimMemory
from prismbox.instrument import ALL_OPTS, ELIDED_Q, instrument
from prismbox.ir import parse
from prismbox.oracle import differential
from prismbox.tagging import Mode, compute_ea, decode_ea32, pow2_aligned_size
from prismbox.vm import VM, EXIT_OK

MODES = ("prism", "pow2", "prism32")

CORPUS_FILES = ("linked_list.pir", "cost_compare.pir", "partial_struct.pir",
                "negative_index.pir", "negative_copy.pir", "end_escape.pir",
                "off_by_one.pir", "backward.pir")


def _active_access(iprog, fn):
    return sum(1 for s in iprog.sites
               if s.executes and s.kind != "Escape" and s.fn == fn)


# --------------------------------------------------------------------------
# 1. Tag encoding roundtrip across the full size spectrum, all modes.

def _roundtrip_sizes():
    sizes = list(range(1, (1 << 16) - 8 + 1))          # every small size
    split = (1 << 16) - 8
    sizes += list(range(split - 64, split + 65))       # boundary +/- 64
    rng = random.Random(2026)
    sizes += [rng.randrange(split + 1, 1 << 28) for _ in range(35_000)]
    return sizes


def test_criterion_1_encoding_roundtrip():
    sizes = _roundtrip_sizes()
    assert len(sizes) >= 100_000
    for kind in MODES:
        mode = Mode(kind, 0)
        mem = SimMemory(mode, materialize=False)
        for size in sizes:
            try:
                tagged = mem.alloc(size)
            except AllocError:
                mem = SimMemory(mode, materialize=False)
                tagged = mem.alloc(size)
            rec = mem.records[-1]
            assert mode.strip(tagged) == rec.sa
            if kind == "prism":
                assert compute_ea(tagged) == rec.ea == rec.sa + size
            elif kind == "prism32":
                assert decode_ea32(tagged) == rec.ea == rec.sa + size
            else:
                # pow2 tags carry log2 of the aligned size, not the exact EA;
                # the decoded bound must cover the object end exclusively.
                aligned = pow2_aligned_size(tagged)
                assert aligned == rec.aligned_size
                assert rec.sa % aligned == 0
                assert rec.sa + size < rec.sa + aligned


# --------------------------------------------------------------------------
# 2. Linked-list golden counts and a checkless 1000-node traversal.

def test_criterion_2_linked_list_counts():
    text = corpus_text("linked_list.pir")
    expected = {0: 3, 4: 2, 8: 1, 16: 0}
    for q, want in expected.items():
        iprog = instrument_text(text, "prism", q)
        assert _active_access(iprog, "walk") == want, (q, want)
    res, _, _ = run_text(text, "prism", 16, inputs=[1000])
    assert res.exit_code == EXIT_OK
    assert res.check_stats.dynamic_checks == 0


# --------------------------------------------------------------------------
# 3. cost_compare golden counts at q = 0 / 8 / 24.

def test_criterion_3_cost_compare_counts():
    text = corpus_text("cost_compare.pir")
    for q, want in ((0, 6), (8, 2), (24, 0)):
        iprog = instrument_text(text, "prism", q)
        assert _active_access(iprog, "cost_compare") == want, (q, want)


# --------------------------------------------------------------------------
# 4. Bundled bug corpus: every configured run matches its expectation.

def test_criterion_4_bug_corpus():
    spec = load_corpus()
    assert len(spec["cases"]) == len(CORPUS_FILES)
    failures = []
    for case in spec["cases"]:
        failures += run_corpus_case(case, matrix=True)
    assert failures == []


# --------------------------------------------------------------------------
# 5. Differential fuzzing: 10,000 programs per mode across q in {0, 8, 32},
#    zero disallowed divergences.

@pytest.mark.parametrize("kind", MODES)
def test_criterion_5_differential_fuzz(kind):
    per_q = 3334  # 3 q values -> 10,002 programs for this mode
    total_ok = 0
    for qi, q in enumerate((0, 8, 32)):
        seed = 1_000_000 * MODES.index(kind) + 100_000 * qi
        summary = fuzz.campaign(seed=seed, count=per_q, mode=Mode(kind, q),
                                workers=8)
        assert summary["mismatches"] == [], summary["mismatches"][:3]
        total_ok += summary["ok"]
    assert total_ok >= 10_000


# --------------------------------------------------------------------------
# 6. SA fetches never happen on forward traversals; on backward traversals
#    every fetch coincides with raw(ptr) < raw(ksa).

def test_criterion_6_sa_fetch_rarity():
    for name, inputs in (("linked_list.pir", [200]), ("cost_compare.pir", [])):
        res, _, _ = run_text(corpus_text(name), inputs=inputs)
        assert res.exit_code == EXIT_OK
        assert res.check_stats.sa_fetches == 0, name
    res, _, _ = run_text(corpus_text("backward.pir"), opts=())
    assert res.exit_code == EXIT_OK
    assert res.check_stats.sa_fetches > 0
    assert all(ptr < ksa for ptr, ksa in res.check_stats.fetch_log)


# --------------------------------------------------------------------------
# 7. pow2 relaxation bound: exhaustive predicate sweep over one A=32 object,
#    and the q-padding reservation bound for elided constant-offset accesses.

def test_criterion_7_pow2_relaxation():
    mem = SimMemory(Mode("pow2", 0))
    tagged = mem.alloc(24)                    # aligned size A = 32
    sa = mem.mode.strip(tagged)
    assert pow2_aligned_size(tagged) == 32
    for ptr in range(sa - 40, sa + 41):
        for size in range(0, 5):
            ok = bounds_check_2k(tagged, ptr, size, mem.mode).ok
            want = ptr >= sa and ptr + size <= sa + 31
            assert ok == want, (ptr - sa, size)

    # With q > 0 the reservation grows to A+q-1 bytes.  Elision requires the
    # KSA-relative window end c2 <= q, so an elided access ends at or below
    # SA+q-1 <= SA+A+q-2 (A >= 1): always inside the reservation.
    q = 8
    for name in CORPUS_FILES:
        iprog = instrument_text(corpus_text(name), "pow2", q)
        for site in iprog.sites:
            if site.status == ELIDED_Q and site.kind == "Access":
                assert site.window[1] <= q, (name, site.sid)
    # Dynamically: an elided past-the-end access lands in the reserved
    # slack and runs clean, flagged as an allowed padding event.
    text = """
fn @main() {
^entry:
  %a = alloc 4
  %p = gep %a, 4
  %v = load %p, 4
  ret %v
}
"""
    v = differential(text, Mode("pow2", q))
    assert v.ok and v.checks.exit_code == EXIT_OK
    assert v.allowed_events == 1


# --------------------------------------------------------------------------
# 8. Active-check count is non-increasing in q on every corpus program.

def test_criterion_8_q_monotonicity():
    qs = (0, 4, 8, 16, 24, 32, 48)
    for name in CORPUS_FILES:
        text = corpus_text(name)
        for kind in MODES:
            counts = [instrument_text(text, kind, q).active_count()
                      for q in qs]
            assert all(a >= b for a, b in zip(counts, counts[1:])), \
                (name, kind, counts)


# --------------------------------------------------------------------------
# 9. Optimizations never change the pass/violation classification; widened
#    checks may abort earlier in the trace but never later.

@pytest.mark.parametrize("kind", MODES)
def test_criterion_9_optimization_soundness(kind):
    mode = Mode(kind, 8)
    for seed in range(200):
        text, inputs = fuzz.generate(seed, "mixed")
        on = VM(instrument(parse(text), mode, ALL_OPTS)).run(list(inputs))
        off = VM(instrument(parse(text), mode, ())).run(list(inputs))
        assert (on.exit_code == EXIT_OK) == (off.exit_code == EXIT_OK), seed
        if on.exit_code != EXIT_OK and off.exit_code != EXIT_OK:
            assert on.steps <= off.steps, seed
        v = differential(text, mode, inputs)
        assert v.ok, (seed, v.reason)
