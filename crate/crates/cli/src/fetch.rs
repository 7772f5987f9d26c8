//! `fetch-weights`: download or copy a weights file into a cache directory
//! and verify its SHA-256.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use mapinv_core::backbone::sha256_file;

pub struct FetchRequest {
    pub source: String,
    pub sha256: Option<String>,
    pub cache: PathBuf,
    pub name: Option<String>,
}

/// Default cache: `$MAPINV_CACHE`, else `$HOME/.cache/mapinv`.
pub fn default_cache() -> PathBuf {
    if let Some(dir) = std::env::var_os("MAPINV_CACHE") {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map_or_else(|| PathBuf::from("."), PathBuf::from);
    home.join(".cache").join("mapinv")
}

fn file_name(source: &str) -> Result<String> {
    let trimmed = source.split(['?', '#']).next().unwrap_or(source);
    let name = trimmed.rsplit(['/', '\\']).next().unwrap_or("");
    if name.is_empty() {
        bail!("cannot derive a file name from `{source}`; pass --name");
    }
    Ok(name.to_string())
}

fn is_remote(source: &str) -> bool {
    source.starts_with("http://") || source.starts_with("https://")
}

fn download(url: &str, dest: &Path) -> Result<()> {
    info!("downloading {url}");
    let resp = ureq::get(url).call().with_context(|| format!("requesting {url}"))?;
    let mut reader = resp.into_body().into_reader();
    let mut file = fs::File::create(dest)?;
    io::copy(&mut reader, &mut file).with_context(|| format!("downloading {url}"))?;
    Ok(())
}

/// Returns the path of the verified cached file.
pub fn fetch(req: &FetchRequest) -> Result<PathBuf> {
    let name = match &req.name {
        Some(n) => n.clone(),
        None => file_name(&req.source)?,
    };
    fs::create_dir_all(&req.cache).with_context(|| format!("creating cache {}", req.cache.display()))?;
    let dest = req.cache.join(&name);
    let expected = req.sha256.as_deref().map(str::to_ascii_lowercase);

    if dest.exists() {
        let actual = sha256_file(&dest)?;
        match &expected {
            Some(e) if *e == actual => {
                info!("{} already cached", dest.display());
                return Ok(dest);
            }
            None => {
                info!("{} already cached (sha256 {actual})", dest.display());
                return Ok(dest);
            }
            Some(_) => warn!("cached {} has the wrong checksum; fetching again", dest.display()),
        }
    }

    let partial = req.cache.join(format!("{name}.partial"));
    if is_remote(&req.source) {
        download(&req.source, &partial)?;
    } else {
        let src = req.source.strip_prefix("file://").unwrap_or(&req.source);
        fs::copy(src, &partial).with_context(|| format!("copying {src}"))?;
    }
    let actual = sha256_file(&partial)?;
    if let Some(e) = &expected {
        if *e != actual {
            fs::remove_file(&partial).ok();
            bail!(mapinv_core::Error::ChecksumMismatch {
                expected: e.clone(),
                actual
            });
        }
    }
    fs::rename(&partial, &dest)?;
    info!("stored {} (sha256 {actual})", dest.display());
    Ok(dest)
}
