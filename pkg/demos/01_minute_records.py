"""From raw accelerometer minutes to usable day summaries.

Builds a tiny minute-level dataset by hand and walks the ingestion rules:
nonwear detection from long zero runs, the moderate-intensity cut point,
and the full-day wear rule that decides which days enter the model.
"""

import numpy as np

from actimets.ingest import (
    FULL_DAY_WEAR_MINUTES,
    MINUTES_PER_DAY,
    MODERATE_THRESHOLD,
    NONWEAR_RUN_MINUTES,
    MinuteRecord,
    derive_day_activities,
)


def day_of_minutes(pid, day_index, day_of_week, counts):
    return [
        MinuteRecord(pid, day_index, day_of_week, minute, int(c))
        for minute, c in enumerate(counts)
    ]


def main():
    rng = np.random.default_rng(0)

    # Day 1: a long night of zeros (nonwear), a sedentary morning, and a
    # 45-minute brisk walk above the moderate cut point.
    counts = np.zeros(MINUTES_PER_DAY, dtype=int)
    counts[480:1320] = rng.integers(50, 800, 840)  # worn 08:00 - 22:00
    counts[540:585] = MODERATE_THRESHOLD + 500  # 45 active minutes
    records = day_of_minutes("demo-01", 1, 2, counts)

    # Day 2: the device comes off mid-afternoon for 90 minutes, which is
    # longer than the nonwear run threshold and therefore dropped from
    # wear time; activity minutes on either side still count.
    counts = np.zeros(MINUTES_PER_DAY, dtype=int)
    counts[420:1260] = rng.integers(50, 800, 840)
    counts[900:990] = 0  # 90-minute removal
    counts[700:730] = MODERATE_THRESHOLD + 1200
    records += day_of_minutes("demo-01", 2, 3, counts)

    # Day 3: worn for only four hours, below the full-day rule.
    counts = np.zeros(MINUTES_PER_DAY, dtype=int)
    counts[600:840] = rng.integers(50, 800, 240)
    records += day_of_minutes("demo-01", 3, 4, counts)

    days = derive_day_activities(records)

    print(f"nonwear rule: {NONWEAR_RUN_MINUTES}+ consecutive zero minutes")
    print(f"full-day rule: at least {FULL_DAY_WEAR_MINUTES} wear minutes")
    print(f"moderate cut point: counts > {MODERATE_THRESHOLD}")
    print()
    header = f"{'day':>3} {'weekday':>7} {'wear min':>8} {'mvpa min':>8} {'full day':>8}"
    print(header)
    print("-" * len(header))
    for d in days:
        print(
            f"{d.day_index:>3} {d.day_of_week:>7} {d.wear_minutes:>8} "
            f"{d.mvpa_minutes:>8.0f} {str(d.is_full_day):>8}"
        )
    kept = [d for d in days if d.is_full_day]
    print(f"\n{len(kept)} of {len(days)} days enter the measurement error model")


if __name__ == "__main__":
    main()
