from speechalign.corpus import compute_stats
from speechalign.evaluation import RuleBasedJudge, aggregate, run_task
from speechalign.plots import plot_corpus_stats, plot_eval_report, plot_loss_trace
from speechalign.synthetic import mini_benchmark, mini_benchmark_responder, sample_manifest
from speechalign.generation import SEED_COPY, SamplingConfig, generate_targets

PNG = b"\x89PNG"


def test_figures_written(tmp_path):
    m = sample_manifest()
    pairs = generate_targets(m, SEED_COPY, SamplingConfig(), 2, None).pairs
    a = plot_corpus_stats(compute_stats(pairs, m), tmp_path / "s.png")
    b = plot_loss_trace([(i, 1e-3 * i, 3.0 / (i + 1)) for i in range(20)], tmp_path / "l.png")
    tasks = mini_benchmark(3)
    rep = aggregate({t.task_id: run_task(t, mini_benchmark_responder(), RuleBasedJudge()) for t in tasks})
    c = plot_eval_report(rep, tmp_path / "r.png")
    for p in (a, b, c):
        assert p.read_bytes()[:4] == PNG


def test_loss_plot_reproducible(tmp_path):
    trace = [(i, 0.01, 1.0 / (i + 1)) for i in range(10)]
    plot_loss_trace(trace, tmp_path / "a.png")
    plot_loss_trace(trace, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
