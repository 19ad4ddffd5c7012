import logging

import pandas as pd

logger = logging.getLogger(__name__)

METRICS = ["reward", "success_rate", "total_delay", "planning_seconds"]
AGGREGATE_LABEL = "ALL"


class AnalyticsManager:
    """Aggregates benchmark episode records held by the record store."""

    def __init__(self, db):
        """Initialize with a record store (see `database.db_handler.DatabaseHandler`)."""
        self.db = db

    def episode_frame(self, query=None):
        """
        Get episode records as a DataFrame.

        Args:
            query (dict, optional): Equality filter passed to the store

        Returns:
            pandas.DataFrame: One row per episode, unfinished delays as NaN
        """
        df = pd.DataFrame(self.db.find("episodes", query))
        if df.empty:
            return pd.DataFrame(columns=["instance", "level", "mode", "seed", *METRICS])

        # Unfinished episodes store a null total delay
        df["total_delay"] = pd.to_numeric(df["total_delay"], errors="coerce")
        return df

    def summary_by_instance(self, query=None):
        """
        Per-instance means with one column per (metric, mode) pair.

        The final row, labelled ``ALL``, averages every episode record of
        each mode directly rather than averaging the per-instance means.

        Returns:
            pandas.DataFrame: Rows sorted by instance id, aggregate row last
        """
        df = self.episode_frame(query)
        if df.empty:
            return pd.DataFrame(columns=["instance", "level", "episodes"])

        table = df.groupby(["instance", "mode"])[METRICS].mean().unstack("mode")
        table.columns = [f"{metric}.{mode}" for metric, mode in table.columns]
        table.insert(0, "level", df.groupby("instance")["level"].first())
        table.insert(1, "episodes", df.groupby("instance").size())

        aggregate = df.groupby("mode")[METRICS].mean()
        row = {"level": None, "episodes": len(df)}
        for mode in aggregate.index:
            for metric in METRICS:
                row[f"{metric}.{mode}"] = aggregate.loc[mode, metric]
        table.loc[AGGREGATE_LABEL] = [row.get(column) for column in table.columns]

        table.index.name = "instance"
        return table.reset_index()

    def summary_by_level(self, query=None):
        """
        Mean reward, success rate, delay and planning time per level and mode.

        Returns:
            pandas.DataFrame: One row per (level, mode)
        """
        df = self.episode_frame(query)
        if df.empty:
            return pd.DataFrame(columns=["level", "mode", "episodes", *METRICS])

        grouped = df.groupby(["level", "mode"], dropna=False)
        summary = grouped[METRICS].mean()
        summary.insert(0, "episodes", grouped.size())
        return summary.reset_index()

    def paired_delays(self, first_mode, second_mode, query=None):
        """
        Total delay of two modes side by side on the same (instance, seed).

        Returns:
            pandas.DataFrame: Columns for both modes plus their difference
        """
        df = self.episode_frame(query)
        df = df[df["mode"].isin([first_mode, second_mode])]
        paired = df.pivot_table(index=["instance", "seed"], columns="mode", values="total_delay")
        paired = paired.reindex(columns=[first_mode, second_mode]).dropna()
        paired["difference"] = paired[second_mode] - paired[first_mode]
        return paired.reset_index()

    def failure_counts(self):
        """
        Count recorded per-instance failures.

        Returns:
            dict: Failures by instance id
        """
        counts = {}
        for failure in self.db.get_collection("failures"):
            instance = failure.get("instance", "?")
            counts[instance] = counts.get(instance, 0) + 1
        return counts

    def write_summary(self, path, query=None):
        """Write the per-instance summary table as CSV and return it."""
        table = self.summary_by_instance(query)
        table.to_csv(path, index=False)
        logger.info("Wrote summary of %d rows to %s", len(table), path)
        return table
