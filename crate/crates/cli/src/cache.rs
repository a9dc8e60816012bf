//! On-disk cache of course datasets keyed by (input hash, term, course, k).

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use gradepred::Result;
use gradepred::dataset::{build_course_dataset, read_dataset, write_dataset};
use gradepred::ingest::Cohort;
use gradepred::types::CourseDataset;
use log::debug;
use sha2::{Digest, Sha256};

pub fn input_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Course ids become file names; anything unusual is hex-encoded.
fn file_name(course: &str) -> String {
    if !course.is_empty() && course.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        format!("{course}.ds")
    } else {
        let hex: String = course.bytes().map(|b| format!("{b:02x}")).collect();
        format!("x{hex}.ds")
    }
}

pub struct DatasetCache {
    root: PathBuf,
}

impl DatasetCache {
    pub fn new(dir: PathBuf, input_hash: &str) -> Self {
        DatasetCache {
            root: dir.join(&input_hash[..16]),
        }
    }

    fn path(&self, term: u32, k: usize, course: &str) -> PathBuf {
        self.root.join(format!("t{term}_k{k}")).join(file_name(course))
    }

    /// Returns the cached dataset or builds and stores it.
    pub fn get(&self, term: u32, course: &str, cohort: &Cohort, k: usize) -> Result<CourseDataset> {
        let path = self.path(term, k, course);
        if let Ok(f) = fs::File::open(&path) {
            debug!("cache hit {}", path.display());
            return read_dataset(BufReader::new(f));
        }
        let ds = build_course_dataset(course, cohort, k)?;
        let dir = path.parent().expect("cache paths have a parent");
        fs::create_dir_all(dir)?;
        // Write under a temporary name so a concurrent reader never sees a
        // partial file.
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            write_dataset(&mut w, &ds)?;
            w.flush()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradepred::types::GradeRecord;

    #[test]
    fn cached_dataset_equals_fresh_build() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = Vec::new();
        for i in 0..5 {
            let s = format!("s{i}");
            recs.push(GradeRecord::new(&s, "a", 0, 1.0 + i as f64 / 3.0).unwrap());
            recs.push(GradeRecord::new(&s, "T", 1, 2.0).unwrap());
        }
        let cohort = Cohort::new(recs);
        let cache = DatasetCache::new(dir.path().to_path_buf(), &input_hash(b"x"));
        let first = cache.get(2, "T", &cohort, 1).unwrap();
        let second = cache.get(2, "T", &cohort, 1).unwrap();
        assert_eq!(first, second);
        assert_eq!(first, build_course_dataset("T", &cohort, 1).unwrap());
        assert_eq!(file_name("CS 101/x"), "x4353203130312f78.ds");
    }
}
