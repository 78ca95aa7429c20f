import logging

from pathlib import Path
from typing import Optional, Sequence

from checkin.entity import CATEGORY_CODES
from correlation.entity import CategoryDistribution, CorrelationMatrix

logger = logging.getLogger(__name__)


def _pyplot():
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed; skipping charts (install the `plot` extra)")
        return None
    return plt


class ChartService:
    """Optional bar charts and heatmaps; every function returns None without matplotlib"""
    
    @staticmethod
    def category_bars(distributions: Sequence[CategoryDistribution], path: Path) -> Optional[Path]:
        plt = _pyplot()
        if plt is None:
            return None
        fig, ax = plt.subplots(figsize=(10, 4))
        width = 0.8 / max(len(distributions), 1)
        for i, dist in enumerate(distributions):
            ax.bar([x + i * width for x in range(len(CATEGORY_CODES))], dist.probs, width=width, label=dist.city_id)
        ax.set_xticks([x + 0.4 - width / 2 for x in range(len(CATEGORY_CODES))])
        ax.set_xticklabels(CATEGORY_CODES)
        ax.set_ylabel("share of POIs")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        return path
    
    @staticmethod
    def heatmap(matrix: CorrelationMatrix, path: Path) -> Optional[Path]:
        plt = _pyplot()
        if plt is None:
            return None
        fig, ax = plt.subplots(figsize=(5, 4))
        image = ax.imshow(matrix.as_array(), vmin=-1, vmax=1, cmap="RdBu_r")
        ax.set_xticks(range(len(matrix.city_ids)))
        ax.set_xticklabels(matrix.city_ids)
        ax.set_yticks(range(len(matrix.city_ids)))
        ax.set_yticklabels(matrix.city_ids)
        for i in range(len(matrix.city_ids)):
            for j in range(len(matrix.city_ids)):
                ax.text(j, i, f"{matrix.as_array()[i, j]:.2f}", ha="center", va="center", fontsize=8)
        ax.set_title(matrix.mode.value)
        fig.colorbar(image, ax=ax)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        return path
