//! Survey data ingestion: raw records, site tables, covariate rasters.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Point2;
use crate::model::{Observation, Site, Source, SurveyDataset};

/// One species count from one survey visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub site_id: String,
    pub year: i32,
    pub species: String,
    pub source: Source,
    pub count: u64,
}

/// Sum species within each (site, source, year), then average over the years
/// in which that site-source pair was surveyed. Output is ordered by site,
/// then source, independent of record order.
pub fn aggregate_counts(records: &[RawRecord], sites: &[Site]) -> Result<Vec<Observation>> {
    if records.is_empty() {
        return Err(Error::invalid("no survey records"));
    }
    let index: HashMap<&str, usize> = sites.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let unknown: BTreeSet<&str> = records
        .iter()
        .filter(|r| !index.contains_key(r.site_id.as_str()))
        .map(|r| r.site_id.as_str())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::invalid(format!(
            "records reference unknown sites: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let mut yearly: BTreeMap<(usize, Source, i32), u64> = BTreeMap::new();
    for r in records {
        let site = index[r.site_id.as_str()];
        if r.source.country() != sites[site].country {
            return Err(Error::invalid(format!(
                "source {} recorded at site `{}` in country {}",
                r.source.number(),
                r.site_id,
                sites[site].country
            )));
        }
        *yearly.entry((site, r.source, r.year)).or_insert(0) += r.count;
    }
    let mut totals: BTreeMap<(usize, Source), (u64, u32)> = BTreeMap::new();
    for ((site, source, _), total) in yearly {
        let e = totals.entry((site, source)).or_insert((0, 0));
        e.0 += total;
        e.1 += 1;
    }
    Ok(totals
        .into_iter()
        .map(|((site, source), (sum, years))| Observation {
            site,
            source,
            y: sum as f64 / years as f64,
        })
        .collect())
}

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn open_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn check_header(found: &csv::StringRecord, expected: &[&str], path: &Path) -> Result<()> {
    let got: Vec<&str> = found.iter().collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(Error::invalid(format!(
            "{}: expected header starting with `{}`, found `{}`",
            path.display(),
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, what: &str, line: u64) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::invalid(format!("line {line}: cannot parse {what} from `{field}`")))
}

/// Read `site_id,x,y,country`.
pub fn read_sites(path: &Path) -> Result<Vec<Site>> {
    let mut rdr = open_reader(path)?;
    check_header(rdr.headers()?, &["site_id", "x", "y", "country"], path)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::invalid(format!("line {line}: duplicate site `{id}`")));
        }
        out.push(Site {
            id,
            location: Point2::new(parse(&rec[1], "x", line)?, parse(&rec[2], "y", line)?),
            country: rec[3].parse()?,
        });
    }
    Ok(out)
}

pub fn write_sites(path: &Path, sites: &[Site]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["site_id", "x", "y", "country"])?;
    for s in sites {
        w.write_record([
            s.id.clone(),
            s.location.x.to_string(),
            s.location.y.to_string(),
            s.country.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read `site_id,year,species,source,count`.
pub fn read_records(path: &Path) -> Result<Vec<RawRecord>> {
    let mut rdr = open_reader(path)?;
    check_header(rdr.headers()?, &["site_id", "year", "species", "source", "count"], path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push(RawRecord {
            site_id: rec[0].to_string(),
            year: parse(&rec[1], "year", line)?,
            species: rec[2].to_string(),
            source: Source::new(parse(&rec[3], "source", line)?)?,
            count: parse(&rec[4], "count", line)?,
        });
    }
    Ok(out)
}

const DATASET_HEADER: [&str; 6] = ["site_id", "x", "y", "country", "source", "mean_count"];

/// Write `site_id,x,y,country,source,mean_count` followed by one column per
/// covariate. Floats use shortest round-trip formatting.
pub fn write_dataset(path: &Path, data: &SurveyDataset) -> Result<()> {
    let mut w = open_writer(path)?;
    let mut header: Vec<String> = DATASET_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend(data.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for o in &data.observations {
        let s = &data.sites[o.site];
        let mut row = vec![
            s.id.clone(),
            s.location.x.to_string(),
            s.location.y.to_string(),
            s.country.to_string(),
            o.source.number().to_string(),
            o.y.to_string(),
        ];
        row.extend(data.covariates[o.site].iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read an aggregated dataset; columns after `mean_count` are covariates.
pub fn read_dataset(path: &Path) -> Result<SurveyDataset> {
    let mut rdr = open_reader(path)?;
    let header = rdr.headers()?.clone();
    check_header(&header, &DATASET_HEADER, path)?;
    let covariate_names: Vec<String> = header.iter().skip(DATASET_HEADER.len()).map(String::from).collect();
    let mut sites: Vec<Site> = Vec::new();
    let mut covariates: Vec<Vec<f64>> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut observations = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let site = Site {
            id: rec[0].to_string(),
            location: Point2::new(parse(&rec[1], "x", line)?, parse(&rec[2], "y", line)?),
            country: rec[3].parse()?,
        };
        let cov = (DATASET_HEADER.len()..rec.len())
            .map(|k| parse::<f64>(&rec[k], "covariate", line))
            .collect::<Result<Vec<_>>>()?;
        if cov.len() != covariate_names.len() {
            return Err(Error::invalid(format!("line {line}: wrong number of covariate columns")));
        }
        let k = match index.get(&site.id) {
            Some(&k) => {
                if sites[k] != site || covariates[k] != cov {
                    return Err(Error::invalid(format!(
                        "line {line}: site `{}` has inconsistent attributes",
                        site.id
                    )));
                }
                k
            }
            None => {
                index.insert(site.id.clone(), sites.len());
                sites.push(site);
                covariates.push(cov);
                sites.len() - 1
            }
        };
        observations.push(Observation {
            site: k,
            source: Source::new(parse(&rec[4], "source", line)?)?,
            y: parse(&rec[5], "mean_count", line)?,
        });
    }
    let data = SurveyDataset {
        sites,
        observations,
        covariate_names,
        covariates,
        source_labels: SurveyDataset::default_labels(),
    };
    data.validate()?;
    Ok(data)
}

/// Regular grid in ESRI ASCII layout: `values` are row-major starting from
/// the northernmost row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRaster {
    pub name: String,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
    pub ncols: usize,
    pub nrows: usize,
    pub nodata: f64,
    pub values: Vec<f64>,
}

impl CovariateRaster {
    pub fn new(name: impl Into<String>, xll: f64, yll: f64, cellsize: f64, ncols: usize, nrows: usize, nodata: f64) -> Result<Self> {
        if !(cellsize > 0.0) || ncols == 0 || nrows == 0 || !xll.is_finite() || !yll.is_finite() {
            return Err(Error::invalid("raster needs positive cell size and dimensions"));
        }
        Ok(Self {
            name: name.into(),
            xllcorner: xll,
            yllcorner: yll,
            cellsize,
            ncols,
            nrows,
            nodata,
            values: vec![nodata; ncols * nrows],
        })
    }

    /// Same geometry, new values.
    pub fn with_values(&self, name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            values,
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.ncols * self.nrows
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.xllcorner == other.xllcorner
            && self.yllcorner == other.yllcorner
            && self.cellsize == other.cellsize
            && self.ncols == other.ncols
            && self.nrows == other.nrows
    }

    /// Centre of the cell at flat index `k`.
    pub fn cell_center(&self, k: usize) -> Point2 {
        let (row, col) = (k / self.ncols, k % self.ncols);
        Point2::new(
            self.xllcorner + (col as f64 + 0.5) * self.cellsize,
            self.yllcorner + ((self.nrows - 1 - row) as f64 + 0.5) * self.cellsize,
        )
    }

    /// Flat index of the cell containing `p`.
    pub fn cell_of(&self, p: Point2) -> Option<usize> {
        let cx = ((p.x - self.xllcorner) / self.cellsize).floor();
        let cy = ((p.y - self.yllcorner) / self.cellsize).floor();
        if !(cx >= 0.0 && cy >= 0.0 && cx < self.ncols as f64 && cy < self.nrows as f64) {
            return None;
        }
        Some((self.nrows - 1 - cy as usize) * self.ncols + cx as usize)
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        !v.is_finite() || v == self.nodata
    }

    /// Nearest-cell value, `None` outside the extent or on nodata.
    pub fn value_at(&self, p: Point2) -> Option<f64> {
        self.cell_of(p).map(|k| self.values[k]).filter(|v| !self.is_nodata(*v))
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|v| !self.is_nodata(*v))
    }

    pub fn to_asc(&self) -> String {
        let mut s = format!(
            "ncols {}\nnrows {}\nxllcorner {}\nyllcorner {}\ncellsize {}\nNODATA_value {}\n",
            self.ncols, self.nrows, self.xllcorner, self.yllcorner, self.cellsize, self.nodata
        );
        for row in self.values.chunks(self.ncols) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_asc(name: impl Into<String>, text: &str) -> Result<Self> {
        let mut header: HashMap<String, String> = HashMap::new();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        while let Some(line) = lines.peek() {
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or("").to_ascii_lowercase();
            if key.starts_with(|c: char| c.is_ascii_alphabetic()) {
                let val = it.next().ok_or_else(|| Error::invalid(format!("raster header `{key}` has no value")))?;
                header.insert(key, val.to_string());
                lines.next();
            } else {
                break;
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| Error::invalid(format!("raster header is missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::invalid(format!("bad raster header `{k}`"))) };
        let ncols = num("ncols")? as usize;
        let nrows = num("nrows")? as usize;
        let (xll, yll) = match (header.get("xllcorner"), header.get("xllcenter")) {
            (Some(_), _) => (num("xllcorner")?, num("yllcorner")?),
            (None, Some(_)) => {
                let c = num("cellsize")?;
                (num("xllcenter")? - 0.5 * c, num("yllcenter")? - 0.5 * c)
            }
            _ => return Err(Error::invalid("raster header is missing `xllcorner`")),
        };
        let nodata = if header.contains_key("nodata_value") { num("nodata_value")? } else { -9999.0 };
        let mut r = Self::new(name, xll, yll, num("cellsize")?, ncols, nrows, nodata)?;
        let values: Vec<f64> = lines
            .flat_map(|l| l.split_whitespace())
            .map(|t| t.parse::<f64>().map_err(|_| Error::invalid(format!("bad raster value `{t}`"))))
            .collect::<Result<_>>()?;
        if values.len() != r.len() {
            return Err(Error::invalid(format!(
                "raster has {} values, header declares {}",
                values.len(),
                r.len()
            )));
        }
        r.values = values;
        Ok(r)
    }

    pub fn read(path: &Path, name: impl Into<String>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_asc(name, &text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_asc()).map_err(|e| Error::io(path, e))
    }
}

/// Per-covariate centring and scaling computed over the prediction grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    pub fn from_rasters(rasters: &[CovariateRaster]) -> Result<Self> {
        let mut means = Vec::new();
        let mut sds = Vec::new();
        for r in rasters {
            let vals: Vec<f64> = r.valid_values().collect();
            if vals.len() < 2 {
                return Err(Error::invalid(format!("raster `{}` has fewer than two valid cells", r.name)));
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if !(sd > 1e-12 * mean.abs().max(1.0)) {
                return Err(Error::invalid(format!("covariate `{}` has zero variance", r.name)));
            }
            means.push(mean);
            sds.push(sd);
        }
        Ok(Self {
            names: rasters.iter().map(|r| r.name.clone()).collect(),
            means,
            sds,
        })
    }

    pub fn apply(&self, k: usize, v: f64) -> f64 {
        (v - self.means[k]) / self.sds[k]
    }
}

/// Nearest-cell covariates at each site, standardised over the raster cells.
pub fn extract_covariates(rasters: &[CovariateRaster], sites: &[Site]) -> Result<(Vec<Vec<f64>>, Standardization)> {
    let std = Standardization::from_rasters(rasters)?;
    let mut x = vec![Vec::with_capacity(rasters.len()); sites.len()];
    for (k, r) in rasters.iter().enumerate() {
        for (row, s) in x.iter_mut().zip(sites) {
            let v = r.value_at(s.location).ok_or_else(|| {
                Error::invalid(format!(
                    "site `{}` falls outside raster `{}` or on a nodata cell",
                    s.id, r.name
                ))
            })?;
            row.push(std.apply(k, v));
        }
    }
    Ok((x, std))
}

/// Pearson correlation of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Keep covariates in priority order, dropping any whose absolute correlation
/// with an already kept covariate exceeds `threshold`. `columns[k]` holds the
/// grid sample of `names[k]`; names absent from `priority` rank last in input order.
pub fn screen_covariates(names: &[String], columns: &[Vec<f64>], threshold: f64, priority: &[String]) -> Result<Vec<String>> {
    if names.len() != columns.len() {
        return Err(Error::invalid("one column per covariate name is required"));
    }
    if let Some(c) = columns.iter().find(|c| c.len() != columns[0].len()) {
        return Err(Error::invalid(format!("covariate columns differ in length ({})", c.len())));
    }
    let rank = |n: &String| priority.iter().position(|p| p == n).unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by_key(|&k| (rank(&names[k]), k));
    let mut kept: Vec<usize> = Vec::new();
    for k in order {
        if kept.iter().all(|&j| pearson(&columns[k], &columns[j]).abs() <= threshold) {
            kept.push(k);
        }
    }
    kept.sort_unstable();
    Ok(kept.into_iter().map(|k| names[k].clone()).collect())
}

/// Valid-cell samples of co-registered rasters, thinned to at most `max_cells`
/// by a fixed stride.
pub fn grid_sample(rasters: &[CovariateRaster], max_cells: usize) -> Result<Vec<Vec<f64>>> {
    let Some(first) = rasters.first() else {
        return Ok(Vec::new());
    };
    if rasters.iter().any(|r| !r.same_geometry(first)) {
        return Err(Error::invalid("rasters must share one grid"));
    }
    let valid: Vec<usize> = (0..first.len())
        .filter(|&k| rasters.iter().all(|r| !r.is_nodata(r.values[k])))
        .collect();
    let stride = valid.len().div_ceil(max_cells.max(1)).max(1);
    Ok(rasters
        .iter()
        .map(|r| valid.iter().step_by(stride).map(|&k| r.values[k]).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Country;
    use proptest::prelude::*;

    fn sites() -> Vec<Site> {
        vec![
            Site {
                id: "s1".into(),
                location: Point2::new(0.5, 0.5),
                country: Country::A,
            },
            Site {
                id: "s2".into(),
                location: Point2::new(2.5, 1.5),
                country: Country::B,
            },
        ]
    }

    fn rec(site: &str, year: i32, species: &str, source: u8, count: u64) -> RawRecord {
        RawRecord {
            site_id: site.into(),
            year,
            species: species.into(),
            source: Source::new(source).unwrap(),
            count,
        }
    }

    #[test]
    fn species_are_summed_and_years_averaged() {
        let s = sites();
        let obs = aggregate_counts(&[rec("s1", 2010, "a", 1, 3), rec("s1", 2010, "b", 1, 2)], &s).unwrap();
        assert_eq!(obs[0].y, 5.0);
        let obs = aggregate_counts(&[rec("s1", 2010, "a", 1, 4), rec("s1", 2011, "a", 1, 6)], &s).unwrap();
        assert_eq!(obs[0].y, 5.0);
        // third year not surveyed: mean over visited years only
        let obs = aggregate_counts(
            &[rec("s1", 2010, "a", 1, 4), rec("s1", 2011, "a", 1, 6), rec("s2", 2012, "a", 3, 1)],
            &s,
        )
        .unwrap();
        assert_eq!(obs[0].y, 5.0);
        assert_eq!(obs.len(), 2);
    }

    #[test]
    fn unknown_sites_are_listed() {
        let err = aggregate_counts(&[rec("zz", 2010, "a", 1, 1), rec("yy", 2010, "a", 1, 1)], &sites()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("yy") && msg.contains("zz"));
        assert!(aggregate_counts(&[rec("s1", 2010, "a", 3, 1)], &sites()).is_err());
    }

    fn raster(values: Vec<f64>) -> CovariateRaster {
        let mut r = CovariateRaster::new("r", 0.0, 0.0, 1.0, 3, 2, -9999.0).unwrap();
        r.values = values;
        r
    }

    #[test]
    fn nearest_cell_and_standardisation() {
        let r = raster(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        // bottom-left cell is the first value of the last row
        assert_eq!(r.value_at(Point2::new(0.5, 0.5)), Some(4.0));
        assert_eq!(r.value_at(Point2::new(2.5, 1.5)), Some(3.0));
        assert_eq!(r.value_at(Point2::new(3.5, 0.5)), None);
        let (x, std) = extract_covariates(std::slice::from_ref(&r), &sites()).unwrap();
        assert!((x[0][0] - (4.0 - 3.5) / std.sds[0]).abs() < 1e-12);
        let col: Vec<f64> = r.values.iter().map(|v| std.apply(0, *v)).collect();
        assert!(col.iter().sum::<f64>().abs() < 1e-10);
        let c = r.cell_center(4);
        assert_eq!(r.value_at(c), Some(5.0));
    }

    #[test]
    fn constant_raster_is_rejected() {
        let err = extract_covariates(&[raster(vec![2.0; 6])], &sites()).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
        let mut r = raster(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        r.values[3] = -9999.0;
        let err = extract_covariates(&[r], &sites()).unwrap_err();
        assert!(err.to_string().contains("s1"));
    }

    #[test]
    fn asc_round_trip() {
        let r = raster(vec![1.5, -2.0, 3.25, -9999.0, 5.0, 1e-7]);
        let back = CovariateRaster::from_asc("r", &r.to_asc()).unwrap();
        assert_eq!(back, r);
        assert!(CovariateRaster::from_asc("r", "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n1\n").is_err());
    }

    fn correlated(rho: f64, n: usize, freq: f64) -> (Vec<f64>, Vec<f64>) {
        let a: Vec<f64> = (0..n).map(|i| (i as f64 * freq).sin()).collect();
        let e: Vec<f64> = (0..n).map(|i| (i as f64 * freq * 5.17 + 0.3).cos()).collect();
        let b = a.iter().zip(&e).map(|(a, e)| rho * a + (1.0 - rho * rho).sqrt() * e).collect();
        (a, b)
    }

    fn forest_probe() -> Vec<f64> {
        correlated(-0.83, 2000, 0.113).0
    }

    #[test]
    fn screening_drops_lower_priority_member() {
        let (elev, temp) = correlated(-0.81, 2000, 0.37);
        assert!(pearson(&elev, &temp) < -0.7);
        assert!(pearson(&elev, &forest_probe()).abs() < 0.3);
        let (forest, open) = correlated(-0.83, 2000, 0.113);
        let names: Vec<String> = ["temperature", "elevation", "open", "forest"].map(String::from).to_vec();
        let cols = vec![temp, elev, open, forest.iter().map(|v| v + 0.0).collect()];
        let priority: Vec<String> = ["elevation", "forest", "temperature", "open"].map(String::from).to_vec();
        let kept = screen_covariates(&names, &cols, 0.7, &priority).unwrap();
        assert_eq!(kept, vec!["elevation".to_string(), "forest".to_string()]);
    }

    #[test]
    fn uncorrelated_covariates_are_all_kept() {
        let (a, b) = correlated(0.2, 500, 0.37);
        let names = vec!["a".to_string(), "b".to_string()];
        assert_eq!(screen_covariates(&names, &[a, b], 0.7, &[]).unwrap(), names);
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = crate::testutil::five_site_dataset();
        write_dataset(&path, &data).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.observations, data.observations);
        assert_eq!(back.covariates, data.covariates);
        assert_eq!(back.sites, data.sites);

        let spath = dir.path().join("s.csv");
        write_sites(&spath, &data.sites).unwrap();
        assert_eq!(read_sites(&spath).unwrap(), data.sites);
    }

    #[test]
    fn malformed_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        fs::write(&path, "site_id,year,species,source\ns1,2010,a,1\n").unwrap();
        assert!(read_records(&path).is_err());
        fs::write(&path, "site_id,year,species,source,count\ns1,2010,a,7,1\n").unwrap();
        assert!(read_records(&path).is_err());
        fs::write(&path, "site_id,year,species,source,count\ns1,2010,a,1,4\n").unwrap();
        assert_eq!(read_records(&path).unwrap()[0].count, 4);
        assert!(matches!(read_sites(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn aggregation_ignores_record_order(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut recs = Vec::new();
            for y in 0..4 {
                for (k, sp) in ["a", "b", "c"].iter().enumerate() {
                    recs.push(rec("s1", 2000 + y, sp, 1 + (k % 2) as u8, (y as u64 * 7 + k as u64) % 5));
                    recs.push(rec("s2", 2000 + y, sp, 3 + (k % 2) as u8, (y as u64 * 3 + k as u64) % 4));
                }
            }
            let base = aggregate_counts(&recs, &sites()).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            recs.shuffle(&mut rng);
            prop_assert_eq!(aggregate_counts(&recs, &sites()).unwrap(), base);
        }

        #[test]
        fn screening_ignores_column_order(seed in 0u64..100) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (a, b) = correlated(0.9, 300, 0.37);
            let (c, d) = correlated(-0.75, 300, 0.113);
            let mut items: Vec<(String, Vec<f64>)> = vec![("a".into(), a), ("b".into(), b), ("c".into(), c), ("d".into(), d)];
            let priority: Vec<String> = ["b", "a", "d", "c"].map(String::from).to_vec();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            items.shuffle(&mut rng);
            let names: Vec<String> = items.iter().map(|i| i.0.clone()).collect();
            let cols: Vec<Vec<f64>> = items.iter().map(|i| i.1.clone()).collect();
            let mut kept = screen_covariates(&names, &cols, 0.7, &priority).unwrap();
            kept.sort();
            prop_assert_eq!(kept, vec!["b".to_string(), "d".to_string()]);
        }
    }
}
