import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt


class ResultPlotter:
    @staticmethod
    def plot_summary(summary, filename, title, metric='miou'):
        """Bar chart of the per-cell mean with a one-stdev error bar, saved to ``filename``."""
        fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(summary)), 4.5))
        ax.bar(range(len(summary)), summary[f'{metric}_mean'], yerr=summary[f'{metric}_std'].fillna(0.0),
               capsize=3, color='tab:blue')
        ax.set_xticks(range(len(summary)))
        ax.set_xticklabels(summary['cell'], rotation=45, ha='right')
        ax.set_ylabel(f'{metric} (mean ± stdev over seeds)')
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(filename)
        plt.close(fig)
        return filename
