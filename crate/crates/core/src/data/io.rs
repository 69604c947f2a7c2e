use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::Path;

use chrono::NaiveDate;

use super::EntityDataset;
use crate::error::{Error, Result};

type Rows = BTreeMap<String, BTreeMap<NaiveDate, Vec<f64>>>;

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn parse_value(raw: &str) -> Option<f64> {
    match raw {
        "" | "NA" | "NaN" | "nan" => None,
        s => s.parse::<f64>().ok().filter(|v| v.is_finite()),
    }
}

fn expect_prefix(path: &Path, headers: &csv::StringRecord, prefix: &[&str], min_len: usize) -> Result<Vec<String>> {
    let cols: Vec<String> = headers.iter().map(str::to_string).collect();
    if cols.len() < min_len || cols.iter().zip(prefix).any(|(c, p)| c != p) {
        return Err(Error::Data(format!(
            "{}: header must start with {}",
            path.display(),
            prefix.join(",")
        )));
    }
    Ok(cols[prefix.len()..].to_vec())
}

/// Reads a dated file. Entities with an unparseable or empty value are
/// collected in `bad` instead of failing.
fn read_dated(path: &Path, bad: &mut BTreeSet<String>) -> Result<(Vec<String>, Rows)> {
    let mut rdr = open(path)?;
    let names = expect_prefix(path, rdr.headers()?, &["entity_id", "date"], 3)?;
    let mut rows = Rows::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != names.len() + 2 {
            return Err(Error::Data(format!("{}: row {} has {} fields", path.display(), line + 2, rec.len())));
        }
        let id = rec[0].to_string();
        let date = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d")
            .map_err(|e| Error::Data(format!("{}: row {}: bad date `{}`: {e}", path.display(), line + 2, &rec[1])))?;
        let vals: Option<Vec<f64>> = rec.iter().skip(2).map(parse_value).collect();
        let Some(vals) = vals else {
            bad.insert(id);
            continue;
        };
        if rows.entry(id.clone()).or_default().insert(date, vals).is_some() {
            return Err(Error::Data(format!("{}: duplicate row for ({id}, {date})", path.display())));
        }
    }
    Ok((names, rows))
}

/// Loads the three-file layout and joins it on entity id and date.
/// Entities missing from any file or carrying missing values are dropped
/// with a warning. Dates may arrive in any order but must be contiguous and
/// identical across entities.
pub fn load_csv(drivers: &Path, response: &Path, statics: &Path) -> Result<EntityDataset> {
    let mut bad = BTreeSet::new();
    let (driver_names, drows) = read_dated(drivers, &mut bad)?;
    let (resp_names, rrows) = read_dated(response, &mut bad)?;
    if resp_names.len() != 1 {
        return Err(Error::Data(format!("{}: expected exactly one response column", response.display())));
    }

    let mut srdr = open(statics)?;
    let static_names = expect_prefix(statics, srdr.headers()?, &["entity_id"], 2)?;
    let mut srows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (line, rec) in srdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != static_names.len() + 1 {
            return Err(Error::Data(format!("{}: row {} has {} fields", statics.display(), line + 2, rec.len())));
        }
        let id = rec[0].to_string();
        match rec.iter().skip(1).map(parse_value).collect::<Option<Vec<f64>>>() {
            None => {
                bad.insert(id);
            }
            Some(v) => {
                if srows.insert(id.clone(), v).is_some() {
                    return Err(Error::Data(format!("{}: duplicate entity `{id}`", statics.display())));
                }
            }
        }
    }

    let all: BTreeSet<&String> = drows.keys().chain(rrows.keys()).chain(srows.keys()).chain(bad.iter()).collect();
    let mut ids = Vec::new();
    for id in all {
        let complete = drows.contains_key(id) && rrows.contains_key(id) && srows.contains_key(id);
        if bad.contains(id) {
            log::warn!("dropping entity `{id}`: missing values");
        } else if !complete {
            log::warn!("dropping entity `{id}`: absent from at least one input file");
        } else {
            ids.push(id.clone());
        }
    }
    if ids.is_empty() {
        return Err(Error::Data("no complete entities".into()));
    }

    let mut dates: Option<Vec<NaiveDate>> = None;
    let mut series = Vec::with_capacity(ids.len());
    let mut static_rows = Vec::with_capacity(ids.len());
    for id in &ids {
        let (d, r) = (&drows[id], &rrows[id]);
        if !d.keys().eq(r.keys()) {
            return Err(Error::Data(format!("entity `{id}`: driver and response dates differ")));
        }
        let keys: Vec<NaiveDate> = d.keys().copied().collect();
        if let Some(gap) = keys.windows(2).find(|w| w[0].succ_opt() != Some(w[1])) {
            return Err(Error::Data(format!("entity `{id}`: date gap between {} and {}", gap[0], gap[1])));
        }
        match &dates {
            None => dates = Some(keys),
            Some(first) if *first != keys => {
                return Err(Error::Data(format!("entity `{id}` covers a different date range")));
            }
            Some(_) => {}
        }
        let s = d.iter().flat_map(|(date, x)| x.iter().copied().chain(std::iter::once(r[date][0]))).collect();
        series.push(s);
        static_rows.push(srows[id].clone());
    }
    let start = dates.expect("at least one entity")[0];
    EntityDataset::new(ids, driver_names, static_names, start, series, static_rows)
}

/// Writes `drivers.csv`, `response.csv` and `statics.csv` in raw units.
pub fn write_csv(ds: &EntityDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (series, statics) = ds.raw_values();
    let c = ds.channels();
    let mut dw = csv::Writer::from_path(dir.join("drivers.csv"))?;
    let mut rw = csv::Writer::from_path(dir.join("response.csv"))?;
    let mut sw = csv::Writer::from_path(dir.join("statics.csv"))?;
    let mut head = vec!["entity_id".to_string(), "date".to_string()];
    head.extend(ds.driver_names.iter().cloned());
    dw.write_record(&head)?;
    rw.write_record(["entity_id", "date", "streamflow"])?;
    let mut shead = vec!["entity_id".to_string()];
    shead.extend(ds.static_names.iter().cloned());
    sw.write_record(&shead)?;
    for (e, id) in ds.entity_ids.iter().enumerate() {
        let mut date = ds.start_date;
        for row in series[e].chunks(c) {
            let d = date.format("%Y-%m-%d").to_string();
            let mut rec = vec![id.clone(), d.clone()];
            rec.extend(row[..c - 1].iter().map(|v| v.to_string()));
            dw.write_record(&rec)?;
            rw.write_record([id.clone(), d, row[c - 1].to_string()])?;
            date = date.succ_opt().ok_or_else(|| Error::Data("date overflow".into()))?;
        }
        let mut rec = vec![id.clone()];
        rec.extend(statics[e].iter().map(|v| v.to_string()));
        sw.write_record(&rec)?;
    }
    dw.flush()?;
    rw.flush()?;
    sw.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fmt::Write as _;

    struct Files {
        dir: tempfile::TempDir,
    }

    impl Files {
        fn new(drivers: &str, response: &str, statics: &str) -> Self {
            let dir = tempfile::tempdir().unwrap();
            std::fs::write(dir.path().join("d.csv"), drivers).unwrap();
            std::fs::write(dir.path().join("r.csv"), response).unwrap();
            std::fs::write(dir.path().join("s.csv"), statics).unwrap();
            Self { dir }
        }

        fn load(&self) -> Result<EntityDataset> {
            let p = self.dir.path();
            load_csv(&p.join("d.csv"), &p.join("r.csv"), &p.join("s.csv"))
        }
    }

    fn tables(ids: &[&str], days: usize) -> (String, String) {
        let mut d = "entity_id,date,rain,temp\n".to_string();
        let mut r = "entity_id,date,streamflow\n".to_string();
        let start = NaiveDate::from_ymd_opt(2001, 3, 1).unwrap();
        for id in ids {
            for k in 0..days {
                let date = start + chrono::Days::new(k as u64);
                writeln!(d, "{id},{date},{},{}", k, 10 + k).unwrap();
                writeln!(r, "{id},{date},{}", 0.5 * k as f64).unwrap();
            }
        }
        (d, r)
    }

    #[test]
    fn complete_files_load() {
        let (d, r) = tables(&["a", "b"], 10);
        let ds = Files::new(&d, &r, "entity_id,area,slope\na,1,2\nb,3,4\n").load().unwrap();
        assert_eq!((ds.n_entities(), ds.steps(), ds.channels(), ds.n_static()), (2, 10, 3, 2));
        assert_eq!(&ds.series(1)[3..6], &[1.0, 11.0, 0.5]);
        assert_eq!(ds.statics(1), &[3.0, 4.0]);
    }

    #[test]
    fn incomplete_entities_are_dropped() {
        let (d, r) = tables(&["a", "b", "c"], 5);
        let ds = Files::new(&d, &r, "entity_id,area\na,1\nb,2\n").load().unwrap();
        assert_eq!(ds.entity_ids, vec!["a", "b"]);
        let ds = Files::new(&d, &r, "entity_id,area\na,1\nb,\nc,3\n").load().unwrap();
        assert_eq!(ds.entity_ids, vec!["a", "c"]);
    }

    #[test]
    fn unordered_dates_are_sorted_and_gaps_rejected() {
        let (d, r) = tables(&["a"], 4);
        let mut lines: Vec<&str> = d.lines().collect();
        lines[1..].reverse();
        let shuffled = lines.join("\n") + "\n";
        let ds = Files::new(&shuffled, &r, "entity_id,area\na,1\n").load().unwrap();
        assert_eq!(ds.series(0)[0], 0.0);
        assert_eq!(ds.start_date, NaiveDate::from_ymd_opt(2001, 3, 1).unwrap());

        let gappy: String = d.lines().enumerate().filter(|(k, _)| *k != 2).map(|(_, l)| format!("{l}\n")).collect();
        let rgappy: String = r.lines().enumerate().filter(|(k, _)| *k != 2).map(|(_, l)| format!("{l}\n")).collect();
        let err = Files::new(&gappy, &rgappy, "entity_id,area\na,1\n").load().unwrap_err();
        assert!(err.to_string().contains("gap"), "{err}");
    }

    #[test]
    fn schema_and_duplicate_errors() {
        let (d, r) = tables(&["a"], 3);
        let dup = format!("{d}a,2001-03-01,0,0\n");
        assert!(Files::new(&dup, &r, "entity_id,area\na,1\n").load().unwrap_err().to_string().contains("duplicate"));
        let bad_header = d.replacen("entity_id,date", "id,day", 1);
        assert!(Files::new(&bad_header, &r, "entity_id,area\na,1\n").load().unwrap_err().is_validation());
    }

    #[test]
    fn export_roundtrip() {
        let ds = super::super::generate_synthetic(3, 730, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_csv(&ds, dir.path()).unwrap();
        let p = dir.path();
        let back = load_csv(&p.join("drivers.csv"), &p.join("response.csv"), &p.join("statics.csv")).unwrap();
        assert_eq!(back, ds);
    }
}
