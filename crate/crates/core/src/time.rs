// SPDX-License-Identifier: Apache-2.0

//! Calendar helpers. All acquisition times are whole days since 1970-01-01 (UTC).

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Day(pub i32);

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).unwrap()
}

impl Day {
    pub fn from_ymd(year: i32, month: u32, day: u32) -> Result<Day> {
        NaiveDate::from_ymd_opt(year, month, day)
            .map(Day::from_date)
            .ok_or_else(|| Error::InvalidArgument(format!("invalid date {year}-{month}-{day}")))
    }

    pub fn from_date(date: NaiveDate) -> Day {
        Day((date - epoch()).num_days() as i32)
    }

    pub fn date(self) -> NaiveDate {
        epoch() + Duration::days(self.0 as i64)
    }

    pub fn year(self) -> i32 {
        self.date().year()
    }

    pub fn month(self) -> u32 {
        self.date().month()
    }

    /// Zero-based day of year (1 January is 0).
    pub fn day_of_year(self) -> i32 {
        self.date().ordinal0() as i32
    }

    pub fn plus(self, days: i32) -> Day {
        Day(self.0 + days)
    }

    pub fn first_of_month(self) -> Day {
        let d = self.date();
        Day::from_date(NaiveDate::from_ymd_opt(d.year(), d.month(), 1).unwrap())
    }

    pub fn first_of_year(self) -> Day {
        Day::from_date(NaiveDate::from_ymd_opt(self.year(), 1, 1).unwrap())
    }

    /// First day of the following calendar month.
    pub fn next_month(self) -> Day {
        let d = self.date();
        let (y, m) = if d.month() == 12 { (d.year() + 1, 1) } else { (d.year(), d.month() + 1) };
        Day::from_date(NaiveDate::from_ymd_opt(y, m, 1).unwrap())
    }

    /// `YYYYMMDD`, used in product identifiers.
    pub fn compact(self) -> String {
        self.date().format("%Y%m%d").to_string()
    }
}

impl fmt::Display for Day {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.date().format("%Y-%m-%d"))
    }
}

impl FromStr for Day {
    type Err = Error;

    fn from_str(s: &str) -> Result<Day> {
        NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
            .map(Day::from_date)
            .map_err(|e| Error::InvalidArgument(format!("bad date '{s}': {e}")))
    }
}

impl Serialize for Day {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Day {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Day, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Month numbers at which the four seasons begin. The first entry is the
/// season that may straddle the turn of the year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonScheme {
    pub starts: [u32; 4],
}

impl SeasonScheme {
    /// DJF / MAM / JJA / SON.
    pub const METEOROLOGICAL: SeasonScheme = SeasonScheme { starts: [12, 3, 6, 9] };

    pub fn season_start(&self, day: Day) -> Day {
        let d = day.date();
        let (year, month) = (d.year(), d.month());
        let mut starts = self.starts;
        starts.sort_unstable();
        // latest season start month <= month, else the last one of the previous year
        match starts.iter().rev().find(|&&m| m <= month) {
            Some(&m) => Day::from_date(NaiveDate::from_ymd_opt(year, m, 1).unwrap()),
            None => Day::from_date(NaiveDate::from_ymd_opt(year - 1, starts[3], 1).unwrap()),
        }
    }
}

impl Default for SeasonScheme {
    fn default() -> Self {
        SeasonScheme::METEOROLOGICAL
    }
}

/// Temporal grouping unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    Day,
    Month,
    Season,
    Year,
    WholeRange,
}

impl Period {
    /// Start of the period containing `day`. `range_start` anchors `WholeRange`.
    pub fn start_of(self, day: Day, range_start: Day, seasons: &SeasonScheme) -> Day {
        match self {
            Period::Day => day,
            Period::Month => day.first_of_month(),
            Period::Season => seasons.season_start(day),
            Period::Year => day.first_of_year(),
            Period::WholeRange => range_start,
        }
    }

    /// Consecutive period starts covering `[from, to]` (both inclusive).
    pub fn enumerate(self, from: Day, to: Day, seasons: &SeasonScheme) -> Vec<Day> {
        let mut out = Vec::new();
        if to < from {
            return out;
        }
        if self == Period::WholeRange {
            out.push(from);
            return out;
        }
        let mut d = from;
        while d <= to {
            let s = self.start_of(d, from, seasons);
            if out.last() != Some(&s) {
                out.push(s);
            }
            d = match self {
                Period::Day => d.plus(1),
                Period::Month => d.next_month(),
                Period::Year => Day::from_ymd(d.year() + 1, 1, 1).unwrap(),
                Period::Season => {
                    let mut n = d.next_month();
                    while seasons.season_start(n) == s {
                        n = n.next_month();
                    }
                    n
                }
                Period::WholeRange => unreachable!(),
            };
        }
        out
    }

    /// Label for column names and CSV output.
    pub fn label(self, start: Day) -> String {
        match self {
            Period::Day => start.to_string(),
            Period::Month => start.date().format("%Y-%m").to_string(),
            Period::Season => start.date().format("%Y-%m").to_string(),
            Period::Year => start.year().to_string(),
            Period::WholeRange => "all".to_string(),
        }
    }
}

impl FromStr for Period {
    type Err = Error;

    fn from_str(s: &str) -> Result<Period> {
        match s {
            "day" => Ok(Period::Day),
            "month" => Ok(Period::Month),
            "season" => Ok(Period::Season),
            "year" => Ok(Period::Year),
            "all" | "whole" | "whole_range" | "whole-range" => Ok(Period::WholeRange),
            _ => Err(Error::InvalidArgument(format!("unknown period '{s}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn day_roundtrip() {
        let d = Day::from_ymd(2020, 3, 15).unwrap();
        assert_eq!(d.to_string(), "2020-03-15");
        assert_eq!("2020-03-15".parse::<Day>().unwrap(), d);
        assert_eq!(Day(0).to_string(), "1970-01-01");
        assert_eq!(Day(0).day_of_year(), 0);
    }

    #[test]
    fn meteorological_seasons() {
        let s = SeasonScheme::METEOROLOGICAL;
        let jan = Day::from_ymd(2021, 1, 20).unwrap();
        assert_eq!(s.season_start(jan), Day::from_ymd(2020, 12, 1).unwrap());
        let dec = Day::from_ymd(2021, 12, 2).unwrap();
        assert_eq!(s.season_start(dec), Day::from_ymd(2021, 12, 1).unwrap());
        let jul = Day::from_ymd(2021, 7, 2).unwrap();
        assert_eq!(s.season_start(jul), Day::from_ymd(2021, 6, 1).unwrap());
    }

    #[test]
    fn enumerate_months_and_seasons() {
        let s = SeasonScheme::METEOROLOGICAL;
        let from = Day::from_ymd(2020, 1, 1).unwrap();
        let to = Day::from_ymd(2020, 12, 31).unwrap();
        assert_eq!(Period::Month.enumerate(from, to, &s).len(), 12);
        let seasons = Period::Season.enumerate(from, to, &s);
        assert_eq!(seasons.len(), 5); // DJF(2019), MAM, JJA, SON, DJF(2020)
        assert_eq!(Period::Year.enumerate(from, to, &s), vec![from]);
        assert_eq!(Period::Day.enumerate(from, from.plus(9), &s).len(), 10);
    }
}
