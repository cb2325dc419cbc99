use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{ClassId, Dataset, Instance, Source};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct IndexRow {
    instance_id: String,
    path: PathBuf,
    class_id: ClassId,
}

/// Reads an `instance_id,path,class_id` CSV. Relative paths resolve against the
/// CSV's directory.
pub fn read_index_csv(csv_path: &Path) -> Result<Dataset> {
    let base = csv_path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
    let mut instances = Vec::new();
    for row in reader.deserialize() {
        let row: IndexRow = row.map_err(|e| csv_error(csv_path, e))?;
        let path = if row.path.is_absolute() {
            row.path
        } else {
            base.join(row.path)
        };
        instances.push(Instance {
            id: row.instance_id,
            class_id: row.class_id,
            source: Source::ImageFile(path),
        });
    }
    Dataset::new(instances)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let location = match e.position() {
        Some(p) => format!("{} line {}", path.display(), p.line()),
        None => path.display().to_string(),
    };
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(location, format!("{other:?}")),
    }
}

/// Builds a dataset from `root/<class>/<file>`. Class directories are sorted by
/// name and numbered from 0; instance ids are `<class>/<file>`.
pub fn dataset_from_dir(root: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<PathBuf> = read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    let mut instances = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let class_name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for file in read_dir_sorted(dir)?.into_iter().filter(|p| p.is_file()) {
            let name = file.file_name().unwrap_or_default().to_string_lossy().into_owned();
            instances.push(Instance {
                id: format!("{class_name}/{name}"),
                class_id: class as ClassId,
                source: Source::ImageFile(file),
            });
        }
    }
    Dataset::new(instances)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_index_and_directory_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("index.csv");
        std::fs::write(&csv, "instance_id,path,class_id\na,img/a.png,3\nb,/abs/b.png,1\n").unwrap();
        let ds = read_index_csv(&csv).unwrap();
        assert_eq!(ds.index(), vec![("a".into(), 3), ("b".into(), 1)]);
        let Source::ImageFile(p) = &ds.instances[0].source else { panic!() };
        assert_eq!(p, &dir.path().join("img/a.png"));

        for (cls, file) in [("cat", "1.png"), ("cat", "2.png"), ("ant", "x.png")] {
            std::fs::create_dir_all(dir.path().join("tree").join(cls)).unwrap();
            std::fs::write(dir.path().join("tree").join(cls).join(file), b"").unwrap();
        }
        let ds = dataset_from_dir(&dir.path().join("tree")).unwrap();
        assert_eq!(
            ds.index(),
            vec![("ant/x.png".into(), 0), ("cat/1.png".into(), 1), ("cat/2.png".into(), 1)]
        );
    }

    #[test]
    fn malformed_row_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("index.csv");
        std::fs::write(&csv, "instance_id,path,class_id\na,x.png,notanumber\n").unwrap();
        assert!(matches!(read_index_csv(&csv), Err(Error::Parse { .. })));
    }
}
