"""
Статические SVG-графики диагностических кривых.

Каждая серия - группа <g id="series-..."> с маркером на каждую точку.
Вывод детерминирован: фиксированная соль хэшей SVG, без даты в метаданных.
"""
import logging
import re
from pathlib import Path
from typing import List, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .exceptions import StorageError  # noqa: E402
from .models import MetricsReport, TrainingCurveRow  # noqa: E402

logger = logging.getLogger(__name__)

STYLE = {
    "svg.hashsalt": "diverse-selftalk",
    "svg.fonttype": "path",
    "path.simplify": False,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.5,
    "lines.markersize": 4,
}


def series_id(name: str) -> str:
    return "series-" + re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def _save(fig, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as e:
        raise StorageError(f"Ошибка записи графика {path}: {e}")
    finally:
        plt.close(fig)
    return path


def line_chart(series: Sequence[tuple], path: Path, title: str, xlabel: str, ylabel: str) -> Path:
    """series: (имя, x, y); одна линия с маркерами на серию"""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.5))
        for name, xs, ys in series:
            (line,) = ax.plot(list(xs), list(ys), marker="o", label=name)
            line.set_gid(series_id(name))
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_diagnostics(reports: Union[MetricsReport, Sequence[MetricsReport]], out_dir: Path,
                     name: str = "metrics") -> List[Path]:
    """Косинус соседних состояний и перцентиль истинного изображения по раундам 1..T"""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    out_dir = Path(out_dir)

    cosine = [
        (r.label, range(1, len(r.diagnostics.state_cosine_curve) + 1), r.diagnostics.state_cosine_curve)
        for r in reports
    ]
    percentile = [
        (r.label, range(1, len(r.diagnostics.percentile_rank_curve)), r.diagnostics.percentile_rank_curve[1:])
        for r in reports
    ]
    return [
        line_chart(cosine, out_dir / f"{name}_state_cosine.svg",
                   "Сходство соседних состояний Q-bot", "раунд", "cos(s_{t-1}, s_t)"),
        line_chart(percentile, out_dir / f"{name}_percentile_rank.svg",
                   "Перцентиль истинного изображения", "раунд", "перцентиль"),
    ]


def plot_training_curves(rows: Sequence[TrainingCurveRow], path: Path) -> Path:
    """Функция потерь по эпохам, отдельная серия на фазу"""
    series = []
    for phase in ("sl", "rl"):
        selected = [row for row in rows if row.phase == phase]
        if selected:
            series.append((phase, [row.epoch for row in selected], [row.sl_loss for row in selected]))
    return line_chart(series, path, "Функция потерь", "эпоха", "loss")
