//! Deterministic single-chain ledger simulation.
//!
//! Accounts and token transfers, contracts with word-addressed storage, an
//! append-only event log, and gas metering that reproduces the in-contract
//! vs event-log cost asymmetry. Transactions execute serially; a failed
//! handler rolls back every effect but still pays gas. No consensus or
//! networking: handler code is native Rust registered by name, and the
//! whole chain replays bit-identically from its journal.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A 20-byte account/contract identifier (truncated SHA-256).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub [u8; 20]);

impl Address {
    /// Genesis account address: truncated hash of the account label.
    pub fn for_account(label: &str) -> Address {
        let mut h = Sha256::new();
        h.update(b"account:");
        h.update(label.as_bytes());
        let d = h.finalize();
        let mut a = [0u8; 20];
        a.copy_from_slice(&d[..20]);
        Address(a)
    }

    /// Contract address: truncated hash of (creator, nonce).
    pub fn for_contract(creator: &Address, nonce: u64) -> Address {
        let mut h = Sha256::new();
        h.update(b"contract:");
        h.update(creator.0);
        h.update(nonce.to_le_bytes());
        let d = h.finalize();
        let mut a = [0u8; 20];
        a.copy_from_slice(&d[..20]);
        Address(a)
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(42);
        s.push_str("0x");
        for b in self.0 {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    /// Canonical form only: lowercase hex, optional 0x prefix.
    pub fn from_hex(s: &str) -> Result<Address> {
        let hex = s.strip_prefix("0x").unwrap_or(s);
        if hex.len() != 40 || hex.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(Error::Decode(format!("address {s:?} must be 40 lowercase hex chars")));
        }
        let mut a = [0u8; 20];
        for i in 0..20 {
            a[i] = u8::from_str_radix(&hex[i * 2..i * 2 + 2], 16)
                .map_err(|_| Error::Decode(format!("bad hex in address {s:?}")))?;
        }
        Ok(Address(a))
    }
}

/// 256-bit storage key / word.
pub type Word = [u8; 32];

/// Word-addressed contract storage. Sorted keys keep the consecutive
/// slots a scan walks adjacent in memory.
pub type StorageMap = BTreeMap<Word, Word>;

/// Structured storage slot: tag byte plus two 64-bit indices. The second
/// index sits in the low-order bytes, so slots that differ only in `b`
/// are numerically consecutive (what `sload_contiguous` walks).
pub fn slot(tag: u8, a: u64, b: u64) -> Word {
    let mut k = [0u8; 32];
    k[0] = tag;
    k[8..16].copy_from_slice(&a.to_be_bytes());
    k[24..32].copy_from_slice(&b.to_be_bytes());
    k
}

/// The slot `offset` positions after `first` (256-bit big-endian add).
pub fn word_offset(first: &Word, offset: u64) -> Word {
    let mut out = *first;
    let mut carry = offset as u128;
    let mut i = 32;
    while carry > 0 && i > 0 {
        i -= 1;
        let sum = out[i] as u128 + (carry & 0xff);
        out[i] = sum as u8;
        carry = (carry >> 8) + (sum >> 8);
    }
    out
}

/// Numeric distance from `first` to `key`, assuming key >= first and the
/// gap fits in u64 (true for contiguous reads).
#[inline]
fn word_delta(first: &Word, key: &Word) -> u64 {
    let f_lo = u64::from_be_bytes(first[24..32].try_into().unwrap());
    let k_lo = u64::from_be_bytes(key[24..32].try_into().unwrap());
    if first[..24] == key[..24] {
        return k_lo - f_lo;
    }
    // the range crossed a 64-bit boundary in the low limb
    let f_hi = u64::from_be_bytes(first[16..24].try_into().unwrap());
    let k_hi = u64::from_be_bytes(key[16..24].try_into().unwrap());
    debug_assert_eq!(first[..16], key[..16], "contiguous range wider than u128");
    let f = ((f_hi as u128) << 64) | f_lo as u128;
    let k = ((k_hi as u128) << 64) | k_lo as u128;
    (k - f) as u64
}

pub fn word_from_i64(v: i64) -> Word {
    let mut w = [0u8; 32];
    w[..8].copy_from_slice(&v.to_le_bytes());
    w
}

pub fn i64_from_word(w: &Word) -> i64 {
    i64::from_le_bytes(w[..8].try_into().unwrap())
}

pub fn word_from_u64(v: u64) -> Word {
    let mut w = [0u8; 32];
    w[..8].copy_from_slice(&v.to_le_bytes());
    w
}

pub fn u64_from_word(w: &Word) -> u64 {
    u64::from_le_bytes(w[..8].try_into().unwrap())
}

pub fn word_from_address(a: &Address) -> Word {
    let mut w = [0u8; 32];
    w[..20].copy_from_slice(&a.0);
    w
}

pub fn address_from_word(w: &Word) -> Address {
    let mut a = [0u8; 20];
    a.copy_from_slice(&w[..20]);
    Address(a)
}

/// Metered cost constants. Defaults mirror the public ledger's published
/// schedule so cost orderings carry over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GasSchedule {
    pub tx_base: u64,
    pub storage_write_new: u64,
    pub storage_write_update: u64,
    pub log_base: u64,
    pub log_per_topic: u64,
    pub log_per_byte: u64,
    pub calldata_per_byte: u64,
    pub compute_per_distance_op: u64,
}

impl Default for GasSchedule {
    fn default() -> Self {
        GasSchedule {
            tx_base: 21_000,
            storage_write_new: 20_000,
            storage_write_update: 5_000,
            log_base: 375,
            log_per_topic: 375,
            log_per_byte: 8,
            calldata_per_byte: 16,
            compute_per_distance_op: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Account {
    pub address: Address,
    pub balance: u128,
    pub nonce: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub sequence: u64,
    pub emitter: Address,
    pub topics: Vec<Word>,
    pub data: Vec<u8>,
}

/// Transaction body as submitted (and journaled).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxBody {
    Deploy { handler: String, init_args: Vec<u8> },
    Call { target: Address, method: String, args: Vec<u8> },
    Transfer { recipient: Address, amount: u128 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub sender: Address,
    pub body: TxBody,
}

/// Execution outcome of an accepted transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxReceipt {
    /// Index in the journal.
    pub index: u64,
    pub gas_used: u64,
    /// Distance-op count metered during execution.
    pub compute_ops: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub ret: Vec<u8>,
    /// Address of the deployed contract, for deploys.
    pub deployed: Option<Address>,
}

/// Genesis configuration: labelled, funded accounts. The fee sink is
/// always present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genesis {
    pub accounts: Vec<(String, u128)>,
}

pub const FEE_SINK_LABEL: &str = "fee-sink";

impl Genesis {
    pub fn new(accounts: Vec<(String, u128)>) -> Genesis {
        Genesis { accounts }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractState {
    pub address: Address,
    pub handler: String,
    pub storage: StorageMap,
}

/// Contract code interface. Handlers are pure over the execution context
/// (and hence safe to share across threads).
pub trait Handler: Send + Sync {
    fn init(&self, ctx: &mut ExecCtx<'_>, args: &[u8]) -> Result<()>;
    fn call(&self, ctx: &mut ExecCtx<'_>, method: &str, args: &[u8]) -> Result<Vec<u8>>;
}

/// Named native handlers available to deploys.
pub struct HandlerRegistry {
    handlers: BTreeMap<String, Box<dyn Handler>>,
}

impl HandlerRegistry {
    pub fn new() -> Self {
        HandlerRegistry { handlers: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, handler: Box<dyn Handler>) {
        self.handlers.insert(name.to_string(), handler);
    }

    fn get(&self, name: &str) -> Option<&dyn Handler> {
        self.handlers.get(name).map(|b| b.as_ref())
    }
}

impl Default for HandlerRegistry {
    fn default() -> Self {
        Self::new()
    }
}

/// Buffered effects of the transaction being executed; merged into the
/// chain only when the handler succeeds.
struct Overlay {
    storage: BTreeMap<(Address, Word), Word>,
    events: Vec<(Address, Vec<Word>, Vec<u8>)>,
    gas: u64,
    compute_ops: u64,
    read_only: bool,
}

/// What a handler sees while executing.
pub struct ExecCtx<'a> {
    chain: &'a Chain,
    registry: &'a HandlerRegistry,
    schedule: &'a GasSchedule,
    overlay: &'a mut Overlay,
    /// Call stack of (contract address, caller address).
    frames: Vec<(Address, Address)>,
}

impl<'a> ExecCtx<'a> {
    /// Address of the contract currently executing.
    pub fn this(&self) -> Address {
        self.frames.last().unwrap().0
    }

    /// Immediate caller (transaction sender or calling contract).
    pub fn caller(&self) -> Address {
        self.frames.last().unwrap().1
    }

    pub fn schedule(&self) -> &GasSchedule {
        self.schedule
    }

    /// Read a storage word of the current contract (zero word if unset).
    pub fn sload(&self, key: &Word) -> Word {
        let this = self.this();
        if !self.overlay.storage.is_empty() {
            if let Some(w) = self.overlay.storage.get(&(this, *key)) {
                return *w;
            }
        }
        self.chain
            .contracts
            .get(&this)
            .and_then(|c| c.storage.get(key))
            .copied()
            .unwrap_or([0u8; 32])
    }

    /// Read `count` consecutive storage words starting at `first`
    /// (numeric slot order): equivalent to `count` single `sload`s, one
    /// tree descent instead of `count`.
    pub fn sload_contiguous(&self, first: &Word, count: usize) -> Vec<Word> {
        let this = self.this();
        let last = word_offset(first, count.saturating_sub(1) as u64);
        let mut out = alloc::vec![[0u8; 32]; count];
        if let Some(c) = self.chain.contracts.get(&this) {
            for (k, v) in c.storage.range(*first..=last) {
                out[word_delta(first, k) as usize] = *v;
            }
        }
        if !self.overlay.storage.is_empty() {
            for ((_, k), v) in self.overlay.storage.range((this, *first)..=(this, last)) {
                out[word_delta(first, k) as usize] = *v;
            }
        }
        out
    }

    /// Write a storage word; gas depends on whether the slot is fresh.
    pub fn sstore(&mut self, key: Word, value: Word) -> Result<()> {
        if self.overlay.read_only {
            return Err(Error::HandlerFailure("storage write in read-only call".into()));
        }
        let this = self.this();
        let exists = self.overlay.storage.contains_key(&(this, key))
            || self
                .chain
                .contracts
                .get(&this)
                .map(|c| c.storage.contains_key(&key))
                .unwrap_or(false);
        self.overlay.gas += if exists {
            self.schedule.storage_write_update
        } else {
            self.schedule.storage_write_new
        };
        self.overlay.storage.insert((this, key), value);
        Ok(())
    }

    /// Append an event record (sequence numbers are assigned at commit).
    pub fn emit_event(&mut self, topics: Vec<Word>, data: Vec<u8>) -> Result<()> {
        if self.overlay.read_only {
            return Err(Error::HandlerFailure("event emission in read-only call".into()));
        }
        if topics.len() > 4 {
            return Err(Error::HandlerFailure(format!("{} topics exceed the limit of 4", topics.len())));
        }
        self.overlay.gas += self.schedule.log_base
            + topics.len() as u64 * self.schedule.log_per_topic
            + data.len() as u64 * self.schedule.log_per_byte;
        self.overlay.events.push((self.this(), topics, data));
        Ok(())
    }

    /// Meter fixed-point distance computations.
    pub fn charge_compute(&mut self, distance_ops: u64) {
        self.overlay.compute_ops += distance_ops;
        self.overlay.gas += distance_ops * self.schedule.compute_per_distance_op;
    }

    /// Synchronous call into another deployed contract.
    pub fn call_contract(&mut self, target: Address, method: &str, args: &[u8]) -> Result<Vec<u8>> {
        let handler_name = self
            .chain
            .contracts
            .get(&target)
            .map(|c| c.handler.clone())
            .ok_or_else(|| Error::HandlerFailure(format!("no contract at {}", target.to_hex())))?;
        let handler = self
            .registry
            .get(&handler_name)
            .ok_or_else(|| Error::Configuration(format!("handler {handler_name:?} not registered")))?;
        let caller = self.this();
        self.frames.push((target, caller));
        let out = handler.call(self, method, args);
        self.frames.pop();
        out
    }

    /// Read a storage word of an arbitrary contract. Free, like any
    /// off-chain state read; on-chain costs are metered via
    /// `charge_compute` by the handlers that do real work.
    pub fn sload_of(&self, contract: &Address, key: &Word) -> Word {
        if let Some(w) = self.overlay.storage.get(&(*contract, *key)) {
            return *w;
        }
        self.chain
            .contracts
            .get(contract)
            .and_then(|c| c.storage.get(key))
            .copied()
            .unwrap_or([0u8; 32])
    }
}

/// Committed chain state.
struct Chain {
    accounts: BTreeMap<Address, Account>,
    contracts: BTreeMap<Address, ContractState>,
    events: Vec<EventRecord>,
}

/// The ledger: committed state plus the journal that reproduces it.
pub struct Ledger {
    schedule: GasSchedule,
    genesis: Genesis,
    chain: Chain,
    registry: HandlerRegistry,
    journal: Vec<Transaction>,
    fee_sink: Address,
}

impl Ledger {
    pub fn new(genesis: Genesis, schedule: GasSchedule, registry: HandlerRegistry) -> Ledger {
        let mut accounts = BTreeMap::new();
        let fee_sink = Address::for_account(FEE_SINK_LABEL);
        accounts.insert(fee_sink, Account { address: fee_sink, balance: 0, nonce: 0 });
        for (label, balance) in &genesis.accounts {
            let address = Address::for_account(label);
            accounts.insert(address, Account { address, balance: *balance, nonce: 0 });
        }
        Ledger {
            schedule,
            genesis,
            chain: Chain { accounts, contracts: BTreeMap::new(), events: Vec::new() },
            registry,
            journal: Vec::new(),
            fee_sink,
        }
    }

    pub fn schedule(&self) -> &GasSchedule {
        &self.schedule
    }

    pub fn genesis(&self) -> &Genesis {
        &self.genesis
    }

    pub fn fee_sink(&self) -> Address {
        self.fee_sink
    }

    pub fn journal(&self) -> &[Transaction] {
        &self.journal
    }

    pub fn account(&self, address: &Address) -> Option<&Account> {
        self.chain.accounts.get(address)
    }

    pub fn balance(&self, address: &Address) -> u128 {
        self.chain.accounts.get(address).map(|a| a.balance).unwrap_or(0)
    }

    pub fn total_supply(&self) -> u128 {
        self.chain.accounts.values().map(|a| a.balance).sum()
    }

    pub fn contract(&self, address: &Address) -> Option<&ContractState> {
        self.chain.contracts.get(address)
    }

    pub fn storage_word(&self, contract: &Address, key: &Word) -> Word {
        self.chain
            .contracts
            .get(contract)
            .and_then(|c| c.storage.get(key))
            .copied()
            .unwrap_or([0u8; 32])
    }

    pub fn event_count(&self) -> u64 {
        self.chain.events.len() as u64
    }

    /// Matching events in sequence order. `emitter` and `topic0` filter,
    /// `from_sequence` tails.
    pub fn get_events(
        &self,
        emitter: Option<Address>,
        topic0: Option<&Word>,
        from_sequence: u64,
    ) -> Vec<&EventRecord> {
        let start = from_sequence.min(self.chain.events.len() as u64) as usize;
        self.chain.events[start..]
            .iter()
            .filter(|e| emitter.map(|a| e.emitter == a).unwrap_or(true))
            .filter(|e| topic0.map(|t| e.topics.first() == Some(t)).unwrap_or(true))
            .collect()
    }

    /// Submit a transaction: execute serially, charge gas, journal it.
    pub fn submit(&mut self, tx: Transaction) -> Result<TxReceipt> {
        let sender = tx.sender;
        if !self.chain.accounts.contains_key(&sender) {
            return Err(Error::Rejected(format!("unknown sender {}", sender.to_hex())));
        }
        match &tx.body {
            TxBody::Transfer { recipient, amount } => {
                let gas = self.schedule.tx_base;
                let sender_acct = &self.chain.accounts[&sender];
                let need = *amount + gas as u128;
                if sender_acct.balance < need {
                    return Err(Error::Rejected(format!(
                        "insufficient funds: balance {} < amount {} + gas {}",
                        sender_acct.balance, amount, gas
                    )));
                }
                let recipient = *recipient;
                let amount = *amount;
                self.chain.accounts.get_mut(&sender).unwrap().balance -= need;
                self.chain.accounts.get_mut(&sender).unwrap().nonce += 1;
                self.chain
                    .accounts
                    .entry(recipient)
                    .or_insert(Account { address: recipient, balance: 0, nonce: 0 })
                    .balance += amount;
                self.chain.accounts.get_mut(&self.fee_sink.clone()).unwrap().balance += gas as u128;
                self.journal.push(tx);
                Ok(TxReceipt {
                    index: self.journal.len() as u64 - 1,
                    gas_used: gas,
                    compute_ops: 0,
                    ok: true,
                    error: None,
                    ret: Vec::new(),
                    deployed: None,
                })
            }
            TxBody::Deploy { handler, init_args } => {
                if self.registry.get(handler).is_none() {
                    return Err(Error::Configuration(format!("unknown handler {handler:?}")));
                }
                let nonce = self.chain.accounts[&sender].nonce;
                let address = Address::for_contract(&sender, nonce);
                let calldata_gas = init_args.len() as u64 * self.schedule.calldata_per_byte;
                let mut overlay = Overlay {
                    storage: BTreeMap::new(),
                    events: Vec::new(),
                    gas: 0,
                    compute_ops: 0,
                    read_only: false,
                };
                // the contract must exist for the init context; stage it,
                // then drop it again if init fails
                self.chain.contracts.insert(
                    address,
                    ContractState { address, handler: handler.clone(), storage: StorageMap::default() },
                );
                let outcome = {
                    let mut ctx = ExecCtx {
                        chain: &self.chain,
                        registry: &self.registry,
                        schedule: &self.schedule,
                        overlay: &mut overlay,
                        frames: alloc::vec![(address, sender)],
                    };
                    self.registry.get(handler).unwrap().init(&mut ctx, init_args)
                };
                let gas = self.schedule.tx_base + calldata_gas + overlay.gas;
                let ok = outcome.is_ok();
                if !ok {
                    self.chain.contracts.remove(&address);
                }
                self.finish_execution(tx, sender, gas, overlay, ok, outcome.err(), Vec::new(), ok.then_some(address))
            }
            TxBody::Call { target, method, args } => {
                let handler_name = match self.chain.contracts.get(target) {
                    Some(c) => c.handler.clone(),
                    None => {
                        return Err(Error::Rejected(format!("no contract at {}", target.to_hex())))
                    }
                };
                let handler = self
                    .registry
                    .get(&handler_name)
                    .ok_or_else(|| Error::Configuration(format!("handler {handler_name:?} not registered")))?;
                let calldata_gas = args.len() as u64 * self.schedule.calldata_per_byte;
                let mut overlay = Overlay {
                    storage: BTreeMap::new(),
                    events: Vec::new(),
                    gas: 0,
                    compute_ops: 0,
                    read_only: false,
                };
                let outcome = {
                    let mut ctx = ExecCtx {
                        chain: &self.chain,
                        registry: &self.registry,
                        schedule: &self.schedule,
                        overlay: &mut overlay,
                        frames: alloc::vec![(*target, sender)],
                    };
                    handler.call(&mut ctx, method, args)
                };
                let gas = self.schedule.tx_base + calldata_gas + overlay.gas;
                let (ok, err, ret) = match outcome {
                    Ok(ret) => (true, None, ret),
                    Err(e) => (false, Some(e), Vec::new()),
                };
                self.finish_execution(tx, sender, gas, overlay, ok, err, ret, None)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_execution(
        &mut self,
        tx: Transaction,
        sender: Address,
        gas: u64,
        overlay: Overlay,
        ok: bool,
        err: Option<Error>,
        ret: Vec<u8>,
        deployed: Option<Address>,
    ) -> Result<TxReceipt> {
        // gas must be payable whether or not the handler succeeded
        if self.chain.accounts[&sender].balance < gas as u128 {
            if deployed.is_some() {
                self.chain.contracts.remove(&deployed.unwrap());
            }
            return Err(Error::Rejected(format!(
                "insufficient funds for gas {gas} (balance {})",
                self.chain.accounts[&sender].balance
            )));
        }
        self.chain.accounts.get_mut(&sender).unwrap().balance -= gas as u128;
        self.chain.accounts.get_mut(&sender).unwrap().nonce += 1;
        let sink = self.fee_sink;
        self.chain.accounts.get_mut(&sink).unwrap().balance += gas as u128;
        let compute_ops = overlay.compute_ops;
        if ok {
            // merge storage writes and assign event sequence numbers
            for ((contract, key), value) in overlay.storage {
                self.chain
                    .contracts
                    .get_mut(&contract)
                    .expect("contract written by handler exists")
                    .storage
                    .insert(key, value);
            }
            for (emitter, topics, data) in overlay.events {
                let sequence = self.chain.events.len() as u64;
                self.chain.events.push(EventRecord { sequence, emitter, topics, data });
            }
        }
        self.journal.push(tx);
        Ok(TxReceipt {
            index: self.journal.len() as u64 - 1,
            gas_used: gas,
            compute_ops,
            ok,
            error: err.map(|e| e.to_string()),
            ret,
            deployed,
        })
    }

    /// Execute a handler read-only: no state change, no journal entry, no
    /// token movement. Returns (return bytes, metered gas, distance ops).
    pub fn call_readonly(
        &self,
        caller: Address,
        target: Address,
        method: &str,
        args: &[u8],
    ) -> Result<(Vec<u8>, u64, u64)> {
        let handler_name = self
            .chain
            .contracts
            .get(&target)
            .map(|c| c.handler.clone())
            .ok_or_else(|| Error::Rejected(format!("no contract at {}", target.to_hex())))?;
        let handler = self
            .registry
            .get(&handler_name)
            .ok_or_else(|| Error::Configuration(format!("handler {handler_name:?} not registered")))?;
        let mut overlay = Overlay {
            storage: BTreeMap::new(),
            events: Vec::new(),
            gas: args.len() as u64 * self.schedule.calldata_per_byte,
            compute_ops: 0,
            read_only: true,
        };
        let ret = {
            let mut ctx = ExecCtx {
                chain: &self.chain,
                registry: &self.registry,
                schedule: &self.schedule,
                overlay: &mut overlay,
                frames: alloc::vec![(target, caller)],
            };
            handler.call(&mut ctx, method, args)?
        };
        Ok((ret, overlay.gas, overlay.compute_ops))
    }

    /// Canonical SHA-256 over the full committed state.
    pub fn state_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"accounts");
        h.update((self.chain.accounts.len() as u64).to_le_bytes());
        for (addr, acct) in &self.chain.accounts {
            h.update(addr.0);
            h.update(acct.balance.to_le_bytes());
            h.update(acct.nonce.to_le_bytes());
        }
        h.update(b"contracts");
        h.update((self.chain.contracts.len() as u64).to_le_bytes());
        for (addr, c) in &self.chain.contracts {
            h.update(addr.0);
            h.update((c.handler.len() as u64).to_le_bytes());
            h.update(c.handler.as_bytes());
            h.update((c.storage.len() as u64).to_le_bytes());
            for (k, v) in &c.storage {
                h.update(k);
                h.update(v);
            }
        }
        h.update(b"events");
        h.update((self.chain.events.len() as u64).to_le_bytes());
        for e in &self.chain.events {
            h.update(e.sequence.to_le_bytes());
            h.update(e.emitter.0);
            h.update([e.topics.len() as u8]);
            for t in &e.topics {
                h.update(t);
            }
            h.update((e.data.len() as u64).to_le_bytes());
            h.update(&e.data);
        }
        h.finalize().into()
    }

    /// Re-execute a transaction list on a fresh chain with the same
    /// genesis and schedule. Rejected submissions are impossible when
    /// replaying a journal this ledger produced.
    pub fn replay(
        genesis: Genesis,
        schedule: GasSchedule,
        registry: HandlerRegistry,
        transactions: &[Transaction],
    ) -> Result<Ledger> {
        let mut ledger = Ledger::new(genesis, schedule, registry);
        for tx in transactions {
            ledger.submit(tx.clone())?;
        }
        Ok(ledger)
    }
}

// --- journal encoding ----------------------------------------------------

const JOURNAL_MAGIC: &[u8; 4] = b"OPRJ";
const JOURNAL_VERSION: u32 = 1;

/// A journal entry: either a transaction or a state-hash checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JournalRecord {
    Tx(Transaction),
    Checkpoint([u8; 32]),
}

/// Serialize the journal: header (magic, version, gas schedule, genesis
/// accounts) followed by length-prefixed records.
pub fn encode_journal(
    genesis: &Genesis,
    schedule: &GasSchedule,
    records: &[JournalRecord],
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(JOURNAL_MAGIC);
    out.extend_from_slice(&JOURNAL_VERSION.to_le_bytes());
    for v in [
        schedule.tx_base,
        schedule.storage_write_new,
        schedule.storage_write_update,
        schedule.log_base,
        schedule.log_per_topic,
        schedule.log_per_byte,
        schedule.calldata_per_byte,
        schedule.compute_per_distance_op,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(genesis.accounts.len() as u32).to_le_bytes());
    for (label, balance) in &genesis.accounts {
        push_bytes(&mut out, label.as_bytes());
        out.extend_from_slice(&balance.to_le_bytes());
    }
    for rec in records {
        let body = encode_record(rec);
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
    }
    out
}

fn encode_record(rec: &JournalRecord) -> Vec<u8> {
    let mut b = Vec::new();
    match rec {
        JournalRecord::Tx(tx) => match &tx.body {
            TxBody::Deploy { handler, init_args } => {
                b.push(0);
                b.extend_from_slice(&tx.sender.0);
                push_bytes(&mut b, handler.as_bytes());
                push_bytes(&mut b, init_args);
            }
            TxBody::Call { target, method, args } => {
                b.push(1);
                b.extend_from_slice(&tx.sender.0);
                b.extend_from_slice(&target.0);
                push_bytes(&mut b, method.as_bytes());
                push_bytes(&mut b, args);
            }
            TxBody::Transfer { recipient, amount } => {
                b.push(2);
                b.extend_from_slice(&tx.sender.0);
                b.extend_from_slice(&recipient.0);
                b.extend_from_slice(&amount.to_le_bytes());
            }
        },
        JournalRecord::Checkpoint(hash) => {
            b.push(3);
            b.extend_from_slice(hash);
        }
    }
    b
}

fn push_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub struct DecodedJournal {
    pub genesis: Genesis,
    pub schedule: GasSchedule,
    pub records: Vec<JournalRecord>,
}

impl DecodedJournal {
    pub fn transactions(&self) -> Vec<Transaction> {
        self.records
            .iter()
            .filter_map(|r| match r {
                JournalRecord::Tx(tx) => Some(tx.clone()),
                JournalRecord::Checkpoint(_) => None,
            })
            .collect()
    }
}

pub fn decode_journal(bytes: &[u8]) -> Result<DecodedJournal> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Decode("journal truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != JOURNAL_MAGIC {
        return Err(Error::Decode("bad journal magic".into()));
    }
    let ver = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if ver != JOURNAL_VERSION {
        return Err(Error::Decode(format!("unsupported journal version {ver}")));
    }
    let mut sched = [0u64; 8];
    for s in sched.iter_mut() {
        *s = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    }
    let schedule = GasSchedule {
        tx_base: sched[0],
        storage_write_new: sched[1],
        storage_write_update: sched[2],
        log_base: sched[3],
        log_per_topic: sched[4],
        log_per_byte: sched[5],
        calldata_per_byte: sched[6],
        compute_per_distance_op: sched[7],
    };
    let n_accounts = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut accounts = Vec::with_capacity(n_accounts);
    for _ in 0..n_accounts {
        let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let label = String::from_utf8(take(&mut pos, len)?.to_vec())
            .map_err(|_| Error::Decode("bad account label".into()))?;
        let balance = u128::from_le_bytes(take(&mut pos, 16)?.try_into().unwrap());
        accounts.push((label, balance));
    }
    let mut records = Vec::new();
    while pos < bytes.len() {
        let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let body = take(&mut pos, len)?;
        records.push(decode_record(body)?);
    }
    Ok(DecodedJournal { genesis: Genesis::new(accounts), schedule, records })
}

fn decode_record(body: &[u8]) -> Result<JournalRecord> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::Decode("journal record truncated".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_vec = |pos: &mut usize| -> Result<Vec<u8>> {
        let len = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
        Ok(take(pos, len)?.to_vec())
    };
    let kind = take(&mut pos, 1)?[0];
    let rec = match kind {
        0 => {
            let sender = Address(take(&mut pos, 20)?.try_into().unwrap());
            let handler = String::from_utf8(take_vec(&mut pos)?)
                .map_err(|_| Error::Decode("bad handler name".into()))?;
            let init_args = take_vec(&mut pos)?;
            JournalRecord::Tx(Transaction { sender, body: TxBody::Deploy { handler, init_args } })
        }
        1 => {
            let sender = Address(take(&mut pos, 20)?.try_into().unwrap());
            let target = Address(take(&mut pos, 20)?.try_into().unwrap());
            let method = String::from_utf8(take_vec(&mut pos)?)
                .map_err(|_| Error::Decode("bad method name".into()))?;
            let args = take_vec(&mut pos)?;
            JournalRecord::Tx(Transaction { sender, body: TxBody::Call { target, method, args } })
        }
        2 => {
            let sender = Address(take(&mut pos, 20)?.try_into().unwrap());
            let recipient = Address(take(&mut pos, 20)?.try_into().unwrap());
            let amount = u128::from_le_bytes(take(&mut pos, 16)?.try_into().unwrap());
            JournalRecord::Tx(Transaction { sender, body: TxBody::Transfer { recipient, amount } })
        }
        3 => JournalRecord::Checkpoint(take(&mut pos, 32)?.try_into().unwrap()),
        k => return Err(Error::Decode(format!("unknown journal record kind {k}"))),
    };
    if pos != body.len() {
        return Err(Error::Decode("trailing bytes in journal record".into()));
    }
    Ok(rec)
}

// --- event wire format ---------------------------------------------------

/// Encode an event record: sequence (8 LE) + emitter (20) + topic count
/// (1) + topics (32 each) + data length (4 LE) + data.
pub fn encode_event(e: &EventRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(33 + e.topics.len() * 32 + e.data.len());
    out.extend_from_slice(&e.sequence.to_le_bytes());
    out.extend_from_slice(&e.emitter.0);
    out.push(e.topics.len() as u8);
    for t in &e.topics {
        out.extend_from_slice(t);
    }
    out.extend_from_slice(&(e.data.len() as u32).to_le_bytes());
    out.extend_from_slice(&e.data);
    out
}

/// Decode one event record, returning it and the bytes consumed.
pub fn decode_event(bytes: &[u8]) -> Result<(EventRecord, usize)> {
    if bytes.len() < 33 {
        return Err(Error::Decode("event record truncated".into()));
    }
    let sequence = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let emitter = Address(bytes[8..28].try_into().unwrap());
    let n_topics = bytes[28] as usize;
    if n_topics > 4 {
        return Err(Error::Decode(format!("event has {n_topics} topics")));
    }
    let mut pos = 29;
    let mut topics = Vec::with_capacity(n_topics);
    for _ in 0..n_topics {
        if pos + 32 > bytes.len() {
            return Err(Error::Decode("event topics truncated".into()));
        }
        topics.push(bytes[pos..pos + 32].try_into().unwrap());
        pos += 32;
    }
    if pos + 4 > bytes.len() {
        return Err(Error::Decode("event data length truncated".into()));
    }
    let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    if pos + len > bytes.len() {
        return Err(Error::Decode("event data truncated".into()));
    }
    let data = bytes[pos..pos + len].to_vec();
    Ok((EventRecord { sequence, emitter, topics, data }, pos + len))
}

/// Gapless-sequence check used by indexers and tests.
pub fn sequences_gapless(events: &[&EventRecord]) -> bool {
    let mut seen = BTreeSet::new();
    for e in events {
        seen.insert(e.sequence);
    }
    seen.len() == events.len()
}
