//! Canonical archive serialization of file trees.
//!
//! The byte format is the Nix Archive (NAR) format: every token is a
//! length-prefixed, zero-padded string, directory entries appear in bytewise
//! name order, and nothing but the executable bit survives from file
//! metadata. The sha256 of this serialization is the content hash that
//! builders attest to.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hash::OutputHash;

pub const ARCHIVE_MAGIC: &[u8] = b"nix-archive-1";

const PAD: [u8; 8] = [0u8; 8];

/// Directories nested deeper than this are rejected by the decoder.
const MAX_DEPTH: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FsTree {
    Regular { executable: bool, contents: Vec<u8> },
    Symlink { target: Vec<u8> },
    Directory { entries: BTreeMap<Vec<u8>, FsTree> },
}

impl FsTree {
    pub fn file(contents: impl Into<Vec<u8>>) -> Self {
        FsTree::Regular {
            executable: false,
            contents: contents.into(),
        }
    }

    pub fn executable(contents: impl Into<Vec<u8>>) -> Self {
        FsTree::Regular {
            executable: true,
            contents: contents.into(),
        }
    }

    pub fn symlink(target: impl Into<Vec<u8>>) -> Self {
        FsTree::Symlink {
            target: target.into(),
        }
    }

    pub fn empty_dir() -> Self {
        FsTree::Directory {
            entries: BTreeMap::new(),
        }
    }

    /// Builds a directory, rejecting invalid or duplicate entry names.
    pub fn dir<N, I>(entries: I) -> Result<Self, ArchiveError>
    where
        N: Into<Vec<u8>>,
        I: IntoIterator<Item = (N, FsTree)>,
    {
        let mut map = BTreeMap::new();
        for (name, node) in entries {
            let name = name.into();
            validate_entry_name(&name)?;
            if map.contains_key(&name) {
                return Err(ArchiveError::InvalidEntryName(format!(
                    "duplicate entry {}",
                    String::from_utf8_lossy(&name)
                )));
            }
            map.insert(name, node);
        }
        Ok(FsTree::Directory { entries: map })
    }

    /// Materializes the tree at `path`, which must not exist yet.
    pub fn write_to(&self, path: &Path) -> io::Result<()> {
        match self {
            FsTree::Regular {
                executable,
                contents,
            } => {
                fs::write(path, contents)?;
                let mode = if *executable { 0o755 } else { 0o644 };
                fs::set_permissions(path, fs::Permissions::from_mode(mode))
            }
            FsTree::Symlink { target } => {
                std::os::unix::fs::symlink(std::ffi::OsStr::from_bytes(target), path)
            }
            FsTree::Directory { entries } => {
                fs::create_dir(path)?;
                for (name, child) in entries {
                    child.write_to(&path.join(std::ffi::OsStr::from_bytes(name)))?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("invalid directory entry name: {0}")]
    InvalidEntryName(String),
    #[error("malformed archive at byte {offset}: {reason}")]
    MalformedArchive { offset: usize, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("unsupported file type at {0}")]
    UnsupportedNodeType(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn validate_entry_name(name: &[u8]) -> Result<(), ArchiveError> {
    let ok = !name.is_empty()
        && name != b"."
        && name != b".."
        && !name.contains(&b'/')
        && !name.contains(&0);
    if ok {
        Ok(())
    } else {
        Err(ArchiveError::InvalidEntryName(format!(
            "{:?}",
            String::from_utf8_lossy(name)
        )))
    }
}

fn padding_len(len: u64) -> usize {
    ((8 - (len % 8)) % 8) as usize
}

/// Length-prefixed, zero-padded framing of a byte string.
pub fn encode_string(s: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + s.len() + 7);
    write_string(&mut out, s).expect("writing to a Vec cannot fail");
    out
}

fn write_string<W: Write>(w: &mut W, s: &[u8]) -> io::Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s)?;
    w.write_all(&PAD[..padding_len(s.len() as u64)])
}

fn write_contents_from<W: Write, R: Read>(
    w: &mut W,
    len: u64,
    reader: R,
    path: &Path,
) -> Result<(), ArchiveError> {
    w.write_all(&len.to_le_bytes()).map_err(io_err(path))?;
    let copied = io::copy(&mut reader.take(len), w).map_err(io_err(path))?;
    if copied != len {
        return Err(ArchiveError::Io {
            path: path.to_owned(),
            source: io::Error::new(io::ErrorKind::UnexpectedEof, "file shrank while hashing"),
        });
    }
    w.write_all(&PAD[..padding_len(len)]).map_err(io_err(path))
}

/// Writes `encode_tree(tree)` into `w`.
pub fn write_tree<W: Write>(tree: &FsTree, w: &mut W) -> Result<(), ArchiveError> {
    let sink = Path::new("<archive sink>");
    write_string(w, ARCHIVE_MAGIC).map_err(io_err(sink))?;
    write_node(tree, w).map_err(|e| match e {
        NodeError::Name(e) => e,
        NodeError::Io(source) => ArchiveError::Io {
            path: sink.to_owned(),
            source,
        },
    })
}

enum NodeError {
    Name(ArchiveError),
    Io(io::Error),
}

impl From<io::Error> for NodeError {
    fn from(e: io::Error) -> Self {
        NodeError::Io(e)
    }
}

fn write_node<W: Write>(tree: &FsTree, w: &mut W) -> Result<(), NodeError> {
    write_string(w, b"(")?;
    write_string(w, b"type")?;
    match tree {
        FsTree::Regular {
            executable,
            contents,
        } => {
            write_string(w, b"regular")?;
            if *executable {
                write_string(w, b"executable")?;
                write_string(w, b"")?;
            }
            write_string(w, b"contents")?;
            write_string(w, contents)?;
        }
        FsTree::Symlink { target } => {
            write_string(w, b"symlink")?;
            write_string(w, b"target")?;
            write_string(w, target)?;
        }
        FsTree::Directory { entries } => {
            write_string(w, b"directory")?;
            for (name, child) in entries {
                validate_entry_name(name).map_err(NodeError::Name)?;
                write_string(w, b"entry")?;
                write_string(w, b"(")?;
                write_string(w, b"name")?;
                write_string(w, name)?;
                write_string(w, b"node")?;
                write_node(child, w)?;
                write_string(w, b")")?;
            }
        }
    }
    write_string(w, b")")?;
    Ok(())
}

pub fn encode_tree(tree: &FsTree) -> Result<Vec<u8>, ArchiveError> {
    let mut out = Vec::new();
    write_tree(tree, &mut out)?;
    Ok(out)
}

pub fn hash_tree(tree: &FsTree) -> Result<OutputHash, ArchiveError> {
    let mut hasher = Sha256::new();
    write_tree(tree, &mut hasher)?;
    Ok(OutputHash::from_bytes(hasher.finalize().into()))
}

/// Hashes the tree rooted at `path`, streaming file contents.
pub fn hash_path(path: &Path) -> Result<OutputHash, ArchiveError> {
    let mut hasher = Sha256::new();
    write_path(path, &mut hasher)?;
    Ok(OutputHash::from_bytes(hasher.finalize().into()))
}

/// Serializes the filesystem tree at `path` into `w` without buffering
/// whole files.
pub fn write_path<W: Write>(path: &Path, w: &mut W) -> Result<(), ArchiveError> {
    write_string(w, ARCHIVE_MAGIC).map_err(io_err(path))?;
    write_fs_node(path, w)
}

fn write_fs_node<W: Write>(path: &Path, w: &mut W) -> Result<(), ArchiveError> {
    let meta = fs::symlink_metadata(path).map_err(io_err(path))?;
    let ft = meta.file_type();
    let wr = |w: &mut W, s: &[u8]| write_string(w, s).map_err(io_err(path));
    wr(w, b"(")?;
    wr(w, b"type")?;
    if ft.is_file() {
        wr(w, b"regular")?;
        if meta.permissions().mode() & 0o100 != 0 {
            wr(w, b"executable")?;
            wr(w, b"")?;
        }
        wr(w, b"contents")?;
        let file = fs::File::open(path).map_err(io_err(path))?;
        write_contents_from(w, meta.len(), file, path)?;
    } else if ft.is_symlink() {
        let target = fs::read_link(path).map_err(io_err(path))?;
        wr(w, b"symlink")?;
        wr(w, b"target")?;
        wr(w, target.as_os_str().as_bytes())?;
    } else if ft.is_dir() {
        wr(w, b"directory")?;
        for (name, child) in sorted_entries(path)? {
            wr(w, b"entry")?;
            wr(w, b"(")?;
            wr(w, b"name")?;
            wr(w, &name)?;
            wr(w, b"node")?;
            write_fs_node(&child, w)?;
            wr(w, b")")?;
        }
    } else {
        return Err(ArchiveError::UnsupportedNodeType(path.to_owned()));
    }
    wr(w, b")")
}

fn sorted_entries(dir: &Path) -> Result<Vec<(Vec<u8>, PathBuf)>, ArchiveError> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().as_bytes().to_vec();
        validate_entry_name(&name)?;
        entries.push((name, entry.path()));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(entries)
}

/// Loads the tree rooted at `path` into memory.
pub fn snapshot(path: &Path) -> Result<FsTree, ArchiveError> {
    let meta = fs::symlink_metadata(path).map_err(io_err(path))?;
    let ft = meta.file_type();
    if ft.is_file() {
        Ok(FsTree::Regular {
            executable: meta.permissions().mode() & 0o100 != 0,
            contents: fs::read(path).map_err(io_err(path))?,
        })
    } else if ft.is_symlink() {
        let target = fs::read_link(path).map_err(io_err(path))?;
        Ok(FsTree::symlink(target.as_os_str().as_bytes()))
    } else if ft.is_dir() {
        let mut entries = BTreeMap::new();
        for (name, child) in sorted_entries(path)? {
            entries.insert(name, snapshot(&child)?);
        }
        Ok(FsTree::Directory { entries })
    } else {
        Err(ArchiveError::UnsupportedNodeType(path.to_owned()))
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn fail<T>(&self, offset: usize, reason: impl Into<String>) -> Result<T, ArchiveError> {
        Err(ArchiveError::MalformedArchive {
            offset,
            reason: reason.into(),
        })
    }

    fn read_string(&mut self) -> Result<&'a [u8], ArchiveError> {
        let start = self.pos;
        let Some(len_bytes) = self.buf.get(start..start + 8) else {
            return self.fail(start, "truncated length field");
        };
        let len = u64::from_le_bytes(len_bytes.try_into().unwrap());
        let body_start = start + 8;
        let remaining = (self.buf.len() - body_start) as u64;
        let padded = len.checked_add(padding_len(len) as u64);
        match padded {
            Some(p) if p <= remaining => {}
            _ => return self.fail(start, format!("string of length {len} overruns the input")),
        }
        let len = len as usize;
        let body_end = body_start + len;
        let pad_end = body_end + padding_len(len as u64);
        if self.buf[body_end..pad_end].iter().any(|&b| b != 0) {
            return self.fail(body_end, "non-zero padding");
        }
        self.pos = pad_end;
        Ok(&self.buf[body_start..body_end])
    }

    fn expect(&mut self, token: &[u8]) -> Result<(), ArchiveError> {
        let start = self.pos;
        let got = self.read_string()?;
        if got != token {
            return self.fail(
                start,
                format!(
                    "expected {:?}, found {:?}",
                    String::from_utf8_lossy(token),
                    String::from_utf8_lossy(got)
                ),
            );
        }
        Ok(())
    }

    fn node(&mut self, depth: usize) -> Result<FsTree, ArchiveError> {
        if depth > MAX_DEPTH {
            return self.fail(self.pos, "directory nesting too deep");
        }
        self.expect(b"(")?;
        self.expect(b"type")?;
        let type_at = self.pos;
        let tree = match self.read_string()? {
            b"regular" => {
                let tag_at = self.pos;
                let executable = match self.read_string()? {
                    b"executable" => {
                        self.expect(b"")?;
                        self.expect(b"contents")?;
                        true
                    }
                    b"contents" => false,
                    _ => return self.fail(tag_at, "expected \"executable\" or \"contents\""),
                };
                let contents = self.read_string()?.to_vec();
                FsTree::Regular {
                    executable,
                    contents,
                }
            }
            b"symlink" => {
                self.expect(b"target")?;
                FsTree::symlink(self.read_string()?)
            }
            b"directory" => {
                let mut entries = BTreeMap::new();
                let mut prev: Option<&[u8]> = None;
                loop {
                    let tag_at = self.pos;
                    match self.read_string()? {
                        b")" => return Ok(FsTree::Directory { entries }),
                        b"entry" => {}
                        _ => return self.fail(tag_at, "expected \"entry\" or \")\""),
                    }
                    self.expect(b"(")?;
                    self.expect(b"name")?;
                    let name_at = self.pos;
                    let name = self.read_string()?;
                    if validate_entry_name(name).is_err() {
                        return self.fail(name_at, "invalid entry name");
                    }
                    if prev.is_some_and(|p| p >= name) {
                        return self.fail(name_at, "directory entries out of order");
                    }
                    prev = Some(name);
                    self.expect(b"node")?;
                    let child = self.node(depth + 1)?;
                    self.expect(b")")?;
                    entries.insert(name.to_vec(), child);
                }
            }
            other => {
                return self.fail(
                    type_at,
                    format!("unknown node type {:?}", String::from_utf8_lossy(other)),
                )
            }
        };
        self.expect(b")")?;
        Ok(tree)
    }
}

/// Strict inverse of [`encode_tree`].
pub fn decode_tree(bytes: &[u8]) -> Result<FsTree, ArchiveError> {
    let mut d = Decoder { buf: bytes, pos: 0 };
    let magic = d.read_string()?;
    if magic != ARCHIVE_MAGIC {
        return d.fail(0, "bad magic");
    }
    let tree = d.node(0)?;
    if d.pos != bytes.len() {
        return d.fail(d.pos, "trailing bytes after archive");
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn es(s: &[u8]) -> Vec<u8> {
        encode_string(s)
    }

    #[test]
    fn string_framing() {
        assert_eq!(es(b""), vec![0u8; 8]);

        let magic = es(b"nix-archive-1");
        assert_eq!(magic.len(), 24);
        assert_eq!(&magic[..8], &[0x0d, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&magic[8..21], b"nix-archive-1");
        assert_eq!(&magic[21..], &[0, 0, 0]);

        let entry = es(b"entry");
        assert_eq!(entry.len(), 16);
        assert_eq!(entry[0], 5);

        for n in 0..40 {
            assert_eq!(es(&vec![1u8; n]).len() % 8, 0);
        }
    }

    #[test]
    fn empty_directory_layout() {
        let bytes = encode_tree(&FsTree::empty_dir()).unwrap();
        let expected = [
            es(b"nix-archive-1"),
            es(b"("),
            es(b"type"),
            es(b"directory"),
            es(b")"),
        ]
        .concat();
        assert_eq!(bytes.len(), 96);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn regular_file_layout() {
        let bytes = encode_tree(&FsTree::executable(b"hello".to_vec())).unwrap();
        let expected = [
            es(b"nix-archive-1"),
            es(b"("),
            es(b"type"),
            es(b"regular"),
            es(b"executable"),
            es(b""),
            es(b"contents"),
            es(b"hello"),
            es(b")"),
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn insertion_order_is_irrelevant() {
        let a = FsTree::dir([("b", FsTree::file("1")), ("a", FsTree::file("2"))]).unwrap();
        let b = FsTree::dir([("a", FsTree::file("2")), ("b", FsTree::file("1"))]).unwrap();
        assert_eq!(encode_tree(&a).unwrap(), encode_tree(&b).unwrap());
    }

    #[test]
    fn invalid_names_rejected() {
        for bad in [&b""[..], b".", b"..", b"a/b", b"a\0b"] {
            assert!(matches!(
                FsTree::dir([(bad.to_vec(), FsTree::file(""))]),
                Err(ArchiveError::InvalidEntryName(_))
            ));
            let mut entries = BTreeMap::new();
            entries.insert(bad.to_vec(), FsTree::file(""));
            assert!(matches!(
                encode_tree(&FsTree::Directory { entries }),
                Err(ArchiveError::InvalidEntryName(_))
            ));
        }
    }

    fn sample() -> FsTree {
        FsTree::dir([
            ("bin", FsTree::dir([("jq", FsTree::executable("#!/bin/sh\n"))]).unwrap()),
            ("lib", FsTree::symlink("bin")),
            ("README", FsTree::file("jq\n")),
        ])
        .unwrap()
    }

    #[test]
    fn decode_round_trip() {
        let t = sample();
        let bytes = encode_tree(&t).unwrap();
        assert_eq!(decode_tree(&bytes).unwrap(), t);
    }

    #[test]
    fn truncation_rejected() {
        let bytes = encode_tree(&sample()).unwrap();
        for cut in [1, 7, 8, bytes.len() - 1] {
            let err = decode_tree(&bytes[..bytes.len() - cut]).unwrap_err();
            assert!(matches!(err, ArchiveError::MalformedArchive { .. }), "{err}");
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_tree(&sample()).unwrap();
        bytes.extend_from_slice(&es(b"x"));
        assert!(decode_tree(&bytes).is_err());
    }

    #[test]
    fn bad_magic_and_padding_rejected() {
        let mut bytes = encode_tree(&FsTree::file("abc")).unwrap();
        let mut wrong_magic = bytes.clone();
        wrong_magic[8] = b'N';
        assert!(matches!(
            decode_tree(&wrong_magic),
            Err(ArchiveError::MalformedArchive { offset: 0, .. })
        ));
        // last byte of "nix-archive-1" padding
        bytes[23] = 1;
        assert!(matches!(
            decode_tree(&bytes),
            Err(ArchiveError::MalformedArchive { offset: 21, .. })
        ));
    }

    #[test]
    fn unsorted_entries_rejected() {
        let node = |name: &[u8]| {
            [
                es(b"entry"),
                es(b"("),
                es(b"name"),
                es(name),
                es(b"node"),
                encode_tree(&FsTree::file("x")).unwrap()[24..].to_vec(),
                es(b")"),
            ]
            .concat()
        };
        let build = |names: &[&[u8]]| {
            let mut v = [es(b"nix-archive-1"), es(b"("), es(b"type"), es(b"directory")].concat();
            for n in names {
                v.extend(node(n));
            }
            v.extend(es(b")"));
            v
        };
        assert!(decode_tree(&build(&[b"a", b"b"])).is_ok());
        let err = decode_tree(&build(&[b"b", b"a"])).unwrap_err();
        assert!(err.to_string().contains("out of order"), "{err}");
        assert!(decode_tree(&build(&[b"a", b"a"])).is_err());
    }

    #[test]
    fn huge_length_does_not_allocate() {
        let mut bytes = es(b"nix-archive-1");
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_tree(&bytes).is_err());
    }

    #[test]
    fn path_and_snapshot_agree() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("out");
        let t = sample();
        t.write_to(&root).unwrap();
        assert_eq!(snapshot(&root).unwrap(), t);
        assert_eq!(hash_path(&root).unwrap(), hash_tree(&t).unwrap());
        let mut streamed = Vec::new();
        write_path(&root, &mut streamed).unwrap();
        assert_eq!(streamed, encode_tree(&t).unwrap());
    }

    #[test]
    fn flipping_a_content_byte_changes_the_hash() {
        let a = FsTree::file(b"hello\n".to_vec());
        let b = FsTree::file(b"hellp\n".to_vec());
        let ha = hash_tree(&a).unwrap();
        let hb = hash_tree(&b).unwrap();
        assert_ne!(ha, hb);
        // independent recomputation straight from the framing primitive
        let manual = |c: &[u8]| {
            OutputHash::digest(
                [
                    es(b"nix-archive-1"),
                    es(b"("),
                    es(b"type"),
                    es(b"regular"),
                    es(b"contents"),
                    es(c),
                    es(b")"),
                ]
                .concat(),
            )
        };
        assert_eq!(ha, manual(b"hello\n"));
        assert_eq!(hb, manual(b"hellp\n"));
    }

    #[test]
    fn sockets_are_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let sock = dir.path().join("s");
        let _listener = std::os::unix::net::UnixListener::bind(&sock).unwrap();
        assert!(matches!(
            hash_path(&sock),
            Err(ArchiveError::UnsupportedNodeType(_))
        ));
        assert!(matches!(
            hash_path(&dir.path().join("missing")),
            Err(ArchiveError::Io { .. })
        ));
    }
}
