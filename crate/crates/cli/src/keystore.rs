use std::io::Write;
use std::path::{Path, PathBuf};

use rentledger_core::harness::LocalProfile;
use rentledger_core::keys::{generate_keypair, Address, KeyPair, PublicKey, Seed};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// On-disk key. `seed` is the secret; the rest is derivable and kept for
/// reading by eye.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyFile {
    pub name: String,
    pub seed: Seed,
    pub public_key: PublicKey,
    pub address: Address,
}

impl KeyFile {
    pub fn keypair(&self) -> KeyPair {
        generate_keypair(self.seed)
    }
}

/// Keys under `<data>/keys`, profiles under `<data>/profiles`. Nothing here
/// is ever sent to the service.
pub struct Keystore {
    root: PathBuf,
}

fn check_name(name: &str) -> Result<(), CliError> {
    let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_'));
    if ok {
        Ok(())
    } else {
        Err(CliError::usage(format!("key name {name:?} may only use letters, digits, '-' and '_'")))
    }
}

fn write_private(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut file = opts.open(path).map_err(|e| CliError::io(path, e))?;
    file.write_all(bytes).map_err(|e| CliError::io(path, e))
}

impl Keystore {
    pub fn new(data_dir: &Path) -> Self {
        Keystore {
            root: data_dir.to_path_buf(),
        }
    }

    fn key_path(&self, name: &str) -> PathBuf {
        self.root.join("keys").join(format!("{name}.json"))
    }

    fn profile_path(&self, name: &str) -> PathBuf {
        self.root.join("profiles").join(format!("{name}.json"))
    }

    /// Stores a key. Re-creating an identical key is a no-op; replacing a
    /// different one needs `force`.
    pub fn create(&self, name: &str, seed: Seed, force: bool) -> Result<KeyFile, CliError> {
        check_name(name)?;
        let kp = generate_keypair(seed);
        let file = KeyFile {
            name: name.to_string(),
            seed,
            public_key: kp.public_key.clone(),
            address: kp.address(),
        };
        let path = self.key_path(name);
        if path.exists() && !force {
            let existing = self.load(name)?;
            if existing != file {
                return Err(CliError::new(
                    "KeyExists",
                    format!("{} holds a different key; pass --force to replace it", path.display()),
                ));
            }
            return Ok(existing);
        }
        let mut bytes = serde_json::to_vec_pretty(&file).expect("key file serializes");
        bytes.push(b'\n');
        write_private(&path, &bytes)?;
        Ok(file)
    }

    pub fn load(&self, name: &str) -> Result<KeyFile, CliError> {
        check_name(name)?;
        let path = self.key_path(name);
        let bytes = std::fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::new("UnknownKey", format!("no key named {name:?}; run `rentledger keygen --name {name}`"))
            } else {
                CliError::io(&path, e)
            }
        })?;
        let file: KeyFile = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::new("CorruptKey", format!("{}: {e}", path.display())))?;
        if generate_keypair(file.seed).address() != file.address {
            return Err(CliError::new(
                "CorruptKey",
                format!("{}: address does not match seed", path.display()),
            ));
        }
        Ok(file)
    }

    pub fn all(&self) -> Vec<KeyFile> {
        let Ok(entries) = std::fs::read_dir(self.root.join("keys")) else {
            return Vec::new();
        };
        let mut names: Vec<String> = entries
            .flatten()
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".json").map(str::to_owned))
            .collect();
        names.sort();
        names.iter().filter_map(|n| self.load(n).ok()).collect()
    }

    pub fn save_profile(&self, name: &str, profile: &LocalProfile) -> Result<PathBuf, CliError> {
        check_name(name)?;
        let path = self.profile_path(name);
        let bytes = serde_json::to_vec_pretty(profile).expect("profile serializes");
        write_private(&path, &bytes)?;
        Ok(path)
    }
}
