//! Weekday trading calendar. No exchange holidays are modelled.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("start date {start} is after end date {end}")]
pub struct InvertedRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

pub fn is_trading_day(day: NaiveDate) -> bool {
    !matches!(day.weekday(), Weekday::Sat | Weekday::Sun)
}

/// Every Monday..Friday in `[start, end]`, ascending.
pub fn trading_days(start: NaiveDate, end: NaiveDate) -> Result<Vec<NaiveDate>, InvertedRange> {
    if start > end {
        return Err(InvertedRange { start, end });
    }
    Ok(start.iter_days().take_while(|d| *d <= end).filter(|d| is_trading_day(*d)).collect())
}

pub fn last_trading_day_on_or_before(day: NaiveDate) -> NaiveDate {
    let mut d = day;
    while !is_trading_day(d) {
        d = d.checked_sub_days(Days::new(1)).expect("date in range");
    }
    d
}
