//! Directory-backed content-addressed store: one file per object under a
//! two-level fan-out, named by the CID hex. Writes are temp-then-rename;
//! reads verify the digest before returning.

use std::fs;
use std::path::{Path, PathBuf};

use optreg_core::manifest::{compute_cid, Cid, ContentStore};
use optreg_core::{Error, Result};

pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn open(root: impl AsRef<Path>) -> Result<DirStore> {
        fs::create_dir_all(root.as_ref())
            .map_err(|e| Error::Configuration(format!("create store dir: {e}")))?;
        Ok(DirStore { root: root.as_ref().to_path_buf() })
    }

    fn path_of(&self, cid: &Cid) -> PathBuf {
        let hex = &cid.as_str()[4..];
        self.root.join(&hex[..2]).join(&hex[2..4]).join(hex)
    }
}

impl ContentStore for DirStore {
    fn put(&mut self, bytes: &[u8]) -> Result<Cid> {
        let cid = compute_cid(bytes);
        let path = self.path_of(&cid);
        if path.exists() {
            return Ok(cid);
        }
        let dir = path.parent().unwrap();
        fs::create_dir_all(dir).map_err(|e| Error::Configuration(format!("store mkdir: {e}")))?;
        let tmp = dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            cid.as_str().get(4..16).unwrap_or("x")
        ));
        fs::write(&tmp, bytes).map_err(|e| Error::Configuration(format!("store write: {e}")))?;
        fs::rename(&tmp, &path).map_err(|e| Error::Configuration(format!("store rename: {e}")))?;
        Ok(cid)
    }

    fn get(&self, cid: &Cid) -> Result<Vec<u8>> {
        let path = self.path_of(cid);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("object {cid}")))
            }
            Err(e) => return Err(Error::Configuration(format!("store read: {e}"))),
        };
        if &compute_cid(&bytes) != cid {
            return Err(Error::Corruption(format!("{} does not hash to {cid}", path.display())));
        }
        Ok(bytes)
    }

    fn contains(&self, cid: &Cid) -> bool {
        self.path_of(cid).exists()
    }

    fn len(&self) -> usize {
        let mut count = 0;
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            let Ok(entries) = fs::read_dir(&dir) else { continue };
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else if !e.file_name().to_string_lossy().starts_with(".tmp-") {
                    count += 1;
                }
            }
        }
        count
    }
}
