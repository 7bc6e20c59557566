//! `vault`: a small account ledger. Fresh state is `{A: 100, B: 0}`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_arguments, check_env_id, common_label, param, tool, unknown_tool, EnvError, Environment, EnvironmentState,
    BAD_ARGUMENT_TYPE, UNKNOWN_TOOL,
};
use crate::conversation::{error_payload, ToolCall, ToolSpec};

pub const INSUFFICIENT_FUNDS: &str = "insufficient_funds";
pub const UNKNOWN_ACCOUNT: &str = "unknown_account";
pub const INVALID_AMOUNT: &str = "invalid_amount";
pub const ACCOUNT_EXISTS: &str = "account_exists";

const LABELS: &[&str] = &[
    INSUFFICIENT_FUNDS,
    UNKNOWN_ACCOUNT,
    INVALID_AMOUNT,
    ACCOUNT_EXISTS,
    UNKNOWN_TOOL,
    BAD_ARGUMENT_TYPE,
];

const NOTES: &str = "\
balance(account): returns {\"balance\": n}. Fails with \"unknown account <name>\" if the account does not exist.
transfer(src, dst, amount): moves amount from src to dst. Checks in order: amount must be > 0 (\"invalid amount: must be positive\"); src and dst must exist (\"unknown account <name>\"); src balance must cover amount (\"insufficient funds\"). Returns {\"status\": \"ok\", \"src_balance\": n, \"dst_balance\": m}.
deposit(account, amount): amount must be > 0; account must exist. Returns {\"account\": name, \"balance\": n}.
withdraw(account, amount): amount must be > 0; account must exist; balance must cover amount (\"insufficient funds\").
open_account(name): creates an account with balance 0. Fails with \"account <name> already exists\".
list_accounts(): returns {\"accounts\": [names in sorted order]}.
Any tool: unknown tool names fail with \"unknown tool <name>\"; missing, extra, or wrongly typed arguments fail with \"missing argument <p>\", \"unexpected argument <p>\", or \"bad argument type for <p>: expected <type>\". Amounts are integers.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Ledger {
    accounts: BTreeMap<String, i64>,
}

#[derive(Clone, Debug)]
pub struct Vault {
    ledger: Ledger,
    version: u64,
}

fn specs() -> &'static [ToolSpec] {
    static SPECS: OnceLock<Vec<ToolSpec>> = OnceLock::new();
    SPECS.get_or_init(|| {
        vec![
            tool(
                "balance",
                "Get the current balance of an account.",
                vec![param("account", "string", "Account name.")],
            ),
            tool(
                "transfer",
                "Transfer an amount from one account to another.",
                vec![
                    param("src", "string", "Source account."),
                    param("dst", "string", "Destination account."),
                    param("amount", "integer", "Positive amount to move."),
                ],
            ),
            tool(
                "deposit",
                "Deposit an amount into an account.",
                vec![
                    param("account", "string", "Account name."),
                    param("amount", "integer", "Positive amount to deposit."),
                ],
            ),
            tool(
                "withdraw",
                "Withdraw an amount from an account.",
                vec![
                    param("account", "string", "Account name."),
                    param("amount", "integer", "Positive amount to withdraw."),
                ],
            ),
            tool(
                "open_account",
                "Open a new account with a zero balance.",
                vec![param("name", "string", "New account name.")],
            ),
            tool("list_accounts", "List all account names.", vec![]),
        ]
    })
}

impl Default for Vault {
    fn default() -> Self {
        Self::new()
    }
}

impl Vault {
    pub const ID: &'static str = "vault";

    pub fn new() -> Self {
        let accounts = BTreeMap::from([("A".to_string(), 100), ("B".to_string(), 0)]);
        Vault {
            ledger: Ledger { accounts },
            version: 0,
        }
    }

    pub fn from_blob(blob: &Value) -> Result<Self, EnvError> {
        let ledger: Ledger = serde_json::from_value(blob.clone()).map_err(|e| EnvError::InvalidState {
            env: Self::ID.into(),
            reason: e.to_string(),
        })?;
        Ok(Vault { ledger, version: 0 })
    }

    fn account(&self, name: &str) -> Result<i64, Value> {
        self.ledger
            .accounts
            .get(name)
            .copied()
            .ok_or_else(|| error_payload(format!("unknown account {name}")))
    }

    fn amount(call: &ToolCall) -> Result<i64, Value> {
        let amount = call.arg("amount").and_then(|a| a.as_int()).unwrap_or(0);
        if amount <= 0 {
            return Err(error_payload("invalid amount: must be positive"));
        }
        Ok(amount)
    }

    fn run(&mut self, call: &ToolCall) -> Result<Value, Value> {
        let spec = specs()
            .iter()
            .find(|t| t.name == call.tool)
            .ok_or_else(|| unknown_tool(&call.tool))?;
        check_arguments(spec, call)?;
        let s = |k: &str| call.arg(k).and_then(|v| v.as_str()).unwrap_or_default().to_string();
        match call.tool.as_str() {
            "balance" => {
                let balance = self.account(&s("account"))?;
                Ok(json!({ "balance": balance }))
            }
            "transfer" => {
                let amount = Self::amount(call)?;
                let (src, dst) = (s("src"), s("dst"));
                let src_balance = self.account(&src)?;
                self.account(&dst)?;
                if src_balance < amount {
                    return Err(error_payload("insufficient funds"));
                }
                *self.ledger.accounts.get_mut(&src).expect("checked") -= amount;
                *self.ledger.accounts.get_mut(&dst).expect("checked") += amount;
                self.version += 1;
                Ok(json!({
                    "status": "ok",
                    "src_balance": self.ledger.accounts[&src],
                    "dst_balance": self.ledger.accounts[&dst],
                }))
            }
            "deposit" | "withdraw" => {
                let amount = Self::amount(call)?;
                let account = s("account");
                let balance = self.account(&account)?;
                let next = if call.tool == "deposit" {
                    balance
                        .checked_add(amount)
                        .ok_or_else(|| error_payload("invalid amount: overflow"))?
                } else if balance < amount {
                    return Err(error_payload("insufficient funds"));
                } else {
                    balance - amount
                };
                self.ledger.accounts.insert(account.clone(), next);
                self.version += 1;
                Ok(json!({ "account": account, "balance": next }))
            }
            "open_account" => {
                let name = s("name");
                if self.ledger.accounts.contains_key(&name) {
                    return Err(error_payload(format!("account {name} already exists")));
                }
                self.ledger.accounts.insert(name.clone(), 0);
                self.version += 1;
                Ok(json!({ "account": name, "balance": 0 }))
            }
            "list_accounts" => Ok(json!({ "accounts": self.ledger.accounts.keys().collect::<Vec<_>>() })),
            _ => Err(unknown_tool(&call.tool)),
        }
    }
}

impl Environment for Vault {
    fn env_id(&self) -> &str {
        Self::ID
    }

    fn tools(&self) -> &[ToolSpec] {
        specs()
    }

    fn failure_labels(&self) -> &'static [&'static str] {
        LABELS
    }

    fn implementation_notes(&self) -> &'static str {
        NOTES
    }

    fn execute_call(&mut self, call: &ToolCall) -> Value {
        self.run(call).unwrap_or_else(|err| err)
    }

    fn snapshot(&self) -> EnvironmentState {
        EnvironmentState {
            env_id: Self::ID.into(),
            blob: serde_json::to_value(&self.ledger).expect("ledger serializes"),
            version: self.version,
        }
    }

    fn restore(&mut self, state: &EnvironmentState) -> Result<(), EnvError> {
        check_env_id(Self::ID, state)?;
        let restored = Vault::from_blob(&state.blob)?;
        self.ledger = restored.ledger;
        self.version = state.version;
        Ok(())
    }

    fn failure_label(&self, message: &str) -> Option<&'static str> {
        if message == "insufficient funds" {
            Some(INSUFFICIENT_FUNDS)
        } else if message.starts_with("unknown account ") {
            Some(UNKNOWN_ACCOUNT)
        } else if message.starts_with("invalid amount") {
            Some(INVALID_AMOUNT)
        } else if message.starts_with("account ") && message.ends_with(" already exists") {
            Some(ACCOUNT_EXISTS)
        } else {
            common_label(message)
        }
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversation::OutcomeTypeKey;
    use crate::environment::tests::parse_calls;

    fn run(env: &mut Vault, text: &str) -> Vec<Value> {
        env.execute(&parse_calls(text)).payloads
    }

    #[test]
    fn balance_on_fresh_state() {
        let mut v = Vault::new();
        let out = v.execute(&parse_calls(r#"[balance(account="A")]"#));
        assert_eq!(out.payloads, vec![json!({"balance": 100})]);
        assert!(!out.is_failure());
    }

    #[test]
    fn overdraft_leaves_state_unchanged() {
        let mut v = Vault::new();
        let before = v.snapshot();
        let out = v.execute(&parse_calls(r#"[transfer(src="A", dst="B", amount=150)]"#));
        assert_eq!(out.payloads, vec![json!({"error": "insufficient funds"})]);
        assert!(out.is_failure());
        assert_eq!(v.snapshot(), before);
    }

    #[test]
    fn unknown_account() {
        let mut v = Vault::new();
        assert_eq!(
            run(&mut v, r#"[balance(account="Z")]"#),
            vec![json!({"error": "unknown account Z"})]
        );
    }

    #[test]
    fn snapshots_track_version() {
        let mut v = Vault::new();
        let s0 = v.snapshot();
        assert_eq!(s0.blob, json!({"accounts": {"A": 100, "B": 0}}));
        assert_eq!(s0.version, 0);
        assert_eq!(v.snapshot(), s0);
        run(&mut v, r#"[transfer(src="A", dst="B", amount=30)]"#);
        let s1 = v.snapshot();
        assert_eq!(s1.blob, json!({"accounts": {"A": 70, "B": 30}}));
        assert_eq!(s1.version, 1);
    }

    #[test]
    fn restore_rewinds() {
        let mut v = Vault::new();
        let s0 = v.snapshot();
        run(&mut v, r#"[transfer(src="A", dst="B", amount=30)]"#);
        v.restore(&s0).unwrap();
        assert_eq!(run(&mut v, r#"[balance(account="A")]"#), vec![json!({"balance": 100})]);

        let same = v.snapshot();
        v.restore(&same).unwrap();
        assert_eq!(v.snapshot(), same);

        let foreign = EnvironmentState {
            env_id: "fileio".into(),
            ..same
        };
        assert!(matches!(v.restore(&foreign), Err(EnvError::EnvMismatch { .. })));
    }

    #[test]
    fn classification_table() {
        let v = Vault::new();
        let transfer = &parse_calls(r#"[transfer(src="A", dst="B", amount=150)]"#)[0];
        let balance = &parse_calls(r#"[balance(account="A")]"#)[0];
        assert_eq!(
            v.classify_outcome(transfer, &json!({"error": "insufficient funds"})),
            OutcomeTypeKey::new("vault.transfer", INSUFFICIENT_FUNDS)
        );
        assert_eq!(
            v.classify_outcome(balance, &json!({"balance": 100})),
            OutcomeTypeKey::new("vault.balance", "success")
        );
        assert_eq!(
            v.classify_outcome(balance, &json!({"error": "disk on fire"})),
            OutcomeTypeKey::new("vault.balance", "other_failure")
        );
    }

    #[test]
    fn every_label_is_reachable() {
        let mut v = Vault::new();
        let cases = [
            (r#"[withdraw(account="B", amount=1)]"#, INSUFFICIENT_FUNDS),
            (r#"[deposit(account="Q", amount=1)]"#, UNKNOWN_ACCOUNT),
            (r#"[deposit(account="A", amount=0)]"#, INVALID_AMOUNT),
            (r#"[open_account(name="A")]"#, ACCOUNT_EXISTS),
            (r#"[explode()]"#, UNKNOWN_TOOL),
            (r#"[balance(account=1)]"#, BAD_ARGUMENT_TYPE),
            (r#"[balance()]"#, BAD_ARGUMENT_TYPE),
            (r#"[list_accounts(verbose=true)]"#, BAD_ARGUMENT_TYPE),
        ];
        for (text, label) in cases {
            let before = v.snapshot();
            let out = v.execute(&parse_calls(text));
            assert_eq!(out.outcome_types[0].otype, label, "{text}");
            assert_eq!(v.snapshot(), before, "failure mutated state: {text}");
        }
    }

    #[test]
    fn open_and_list() {
        let mut v = Vault::new();
        assert_eq!(
            run(&mut v, r#"[open_account(name="C"), list_accounts()]"#),
            vec![
                json!({"account": "C", "balance": 0}),
                json!({"accounts": ["A", "B", "C"]})
            ]
        );
    }

    #[test]
    fn bad_blob_rejected() {
        assert!(Vault::from_blob(&json!({"accounts": {"A": "lots"}})).is_err());
    }
}
