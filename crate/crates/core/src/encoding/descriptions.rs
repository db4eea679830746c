use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ConceptDescription, Perspective};
use crate::error::{Error, Result};

/// Reads `<concept_id>.<perspective>.txt` files from `dir`.
///
/// Other files are ignored. Every concept found must have all three
/// perspectives.
pub fn load_descriptions(dir: &Path) -> Result<BTreeMap<String, Vec<ConceptDescription>>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out: BTreeMap<String, Vec<ConceptDescription>> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_suffix(".txt") else {
            continue;
        };
        let Some((concept_id, perspective)) = stem.rsplit_once('.') else {
            return Err(Error::format(
                "description file name",
                format!("{name} is not <concept_id>.<perspective>.txt"),
            ));
        };
        let perspective: Perspective = perspective.parse()?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let desc = ConceptDescription::new(concept_id, perspective, text.trim_end())?;
        out.entry(concept_id.to_owned()).or_default().push(desc);
    }
    for (id, descs) in out.iter_mut() {
        descs.sort_by_key(|d| d.perspective);
        for p in Perspective::ALL {
            if !descs.iter().any(|d| d.perspective == p) {
                return Err(Error::MissingPerspective {
                    concept_id: id.clone(),
                    perspective: p.as_str(),
                });
            }
        }
    }
    Ok(out)
}
