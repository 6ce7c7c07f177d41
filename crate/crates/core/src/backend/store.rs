//! Precomputed embeddings on disk.
//!
//! Layout of a store directory:
//!
//! ```text
//! index.tsv     header `#store<TAB>dim=<d><TAB>id=<id><TAB>version=<v>`, then
//!               one `<hash><TAB><byte offset><TAB><len>` line per record
//! vectors.bin   concatenated little-endian f32 records
//! ```
//!
//! Text records are keyed by the SHA-256 of the prompt text, image records by
//! the image content id (itself the SHA-256 of the image bytes).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{
    check_dim, content_hash, BackendDescriptor, BackendKind, ImageEncoder, ImageRef,
    TextEncoder,
};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::taxonomy::RenderedPrompt;

const INDEX: &str = "index.tsv";
const VECTORS: &str = "vectors.bin";
const HEADER_TAG: &str = "#store";

pub fn text_key(text: &str) -> String {
    content_hash(text.as_bytes())
}

#[derive(Debug)]
pub struct FileStore {
    descriptor: BackendDescriptor,
    index: HashMap<String, (usize, usize)>,
    data: Vec<u8>,
}

impl FileStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index_path = dir.join(INDEX);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let vec_path = dir.join(VECTORS);
        let data = fs::read(&vec_path).map_err(|e| Error::io(&vec_path, e))?;

        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing store header".into(),
        })?;
        let descriptor = parse_header(header)?;
        let mut index = HashMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let mut parts = line.split('\t');
            let (Some(hash), Some(off), Some(len), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(parse_err("expected `<hash>\\t<offset>\\t<len>`"));
            };
            let off: usize = off.parse().map_err(|_| parse_err("bad offset"))?;
            let len: usize = len.parse().map_err(|_| parse_err("bad length"))?;
            if off + len * 4 > data.len() {
                return Err(parse_err("record extends past vectors.bin"));
            }
            index.insert(hash.to_string(), (off, len));
        }
        Ok(Self {
            descriptor,
            index,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn lookup(&self, key: &str, what: &str) -> Result<Embedding> {
        let &(off, len) = self.index.get(key).ok_or_else(|| Error::BackendUnavailable {
            backend: self.descriptor.id.clone(),
            detail: format!("{what} not in store (key {key})"),
            attempts: 1,
        })?;
        let values: Vec<f32> = self.data[off..off + len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let e = Embedding::from_f32(&values)?;
        check_dim(&self.descriptor, &e)?;
        Ok(e)
    }
}

fn parse_header(line: &str) -> Result<BackendDescriptor> {
    let err = |m: String| Error::Parse { line: 1, message: m };
    let mut parts = line.split('\t');
    if parts.next() != Some(HEADER_TAG) {
        return Err(err(format!("header must start with `{HEADER_TAG}`")));
    }
    let (mut dim, mut id, mut version) = (None, None, None);
    for kv in parts {
        match kv.split_once('=') {
            Some(("dim", v)) => dim = v.parse::<usize>().ok().filter(|d| *d > 0),
            Some(("id", v)) => id = Some(v.to_string()),
            Some(("version", v)) => version = Some(v.to_string()),
            _ => return Err(err(format!("unexpected header field `{kv}`"))),
        }
    }
    Ok(BackendDescriptor {
        id: id.ok_or_else(|| err("header lacks id".into()))?,
        kind: BackendKind::FileStore,
        embedding_dim: dim.ok_or_else(|| err("header lacks a positive dim".into()))?,
        version: version.ok_or_else(|| err("header lacks version".into()))?,
    })
}

impl TextEncoder for FileStore {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_text(&self, prompt: &RenderedPrompt) -> Result<Embedding> {
        self.lookup(&text_key(&prompt.text), &format!("text {:?}", prompt.text))
    }
}

impl ImageEncoder for FileStore {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding> {
        self.lookup(&image.content_id, &format!("image {}", image.content_id))
    }
}

/// Writes a store directory record by record.
pub struct FileStoreWriter {
    dir: PathBuf,
    dim: usize,
    id: String,
    version: String,
    index: Vec<(String, usize, usize)>,
    data: Vec<u8>,
}

impl FileStoreWriter {
    pub fn new(dir: impl Into<PathBuf>, id: &str, version: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("store dim must be positive".into()));
        }
        if [id, version].iter().any(|s| s.is_empty() || s.contains(['\t', '\n', '='])) {
            return Err(Error::InvalidConfig("store id/version must be simple tokens".into()));
        }
        Ok(Self {
            dir: dir.into(),
            dim,
            id: id.into(),
            version: version.into(),
            index: Vec::new(),
            data: Vec::new(),
        })
    }

    /// Adds a raw record; the length is not checked so that malformed stores
    /// can be produced deliberately.
    pub fn push_raw(&mut self, key: &str, values: &[f32]) {
        self.index.push((key.to_string(), self.data.len(), values.len()));
        for v in values {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn push_text(&mut self, text: &str, values: &[f32]) -> Result<()> {
        self.check(values)?;
        self.push_raw(&text_key(text), values);
        Ok(())
    }

    pub fn push_image(&mut self, content_id: &str, values: &[f32]) -> Result<()> {
        self.check(values)?;
        self.push_raw(content_id, values);
        Ok(())
    }

    fn check(&self, values: &[f32]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let vec_path = self.dir.join(VECTORS);
        fs::write(&vec_path, &self.data).map_err(|e| Error::io(&vec_path, e))?;
        let index_path = self.dir.join(INDEX);
        let mut out = format!(
            "{HEADER_TAG}\tdim={}\tid={}\tversion={}\n",
            self.dim, self.id, self.version
        );
        for (k, off, len) in &self.index {
            out.push_str(&format!("{k}\t{off}\t{len}\n"));
        }
        let mut f = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(&index_path, e))
    }
}

/// Builds a store from a plain TSV of `text|image <TAB> key <TAB> values`
/// lines, values separated by spaces or commas. Returns the record count.
pub fn import_lines(
    input: &str,
    dir: impl Into<PathBuf>,
    id: &str,
    version: &str,
) -> Result<usize> {
    let mut writer: Option<FileStoreWriter> = None;
    let dir = dir.into();
    let mut n = 0;
    for (i, line) in input.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: String| Error::Parse {
            line: i + 1,
            message: m,
        };
        let mut parts = line.splitn(3, '\t');
        let (Some(kind), Some(key), Some(vals)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err("expected `<kind>\\t<key>\\t<values>`".into()));
        };
        let values = vals
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f32>().map_err(|_| err(format!("bad value `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let w = match &mut writer {
            Some(w) => w,
            None => writer.insert(FileStoreWriter::new(dir.clone(), id, version, values.len())?),
        };
        let pushed = match kind {
            "text" => w.push_text(key, &values),
            "image" => w.push_image(key, &values),
            other => return Err(err(format!("unknown record kind `{other}`"))),
        };
        pushed.map_err(|e| err(e.to_string()))?;
        n += 1;
    }
    writer
        .ok_or(Error::Parse {
            line: 0,
            message: "no records".into(),
        })?
        .finish()?;
    Ok(n)
}
