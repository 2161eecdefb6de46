import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional

# Aggiungi la directory principale al PYTHONPATH
sys.path.insert(0, str(Path(__file__).parent.parent))

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st

from database.sqlite_db import Database


def load_history(db: Database, run_hash: Optional[str] = None) -> pd.DataFrame:
    """Storico delle epoche in formato tabellare

    Args:
        db: Database delle metriche
        run_hash: Filtra su una singola esecuzione

    Returns:
        DataFrame con una riga per epoca e una colonna per componente di loss
        (prefisso 'loss_') e per gruppo di learning rate (prefisso 'lr_')
    """
    rows = []
    for record in db.load_epochs(run_hash):
        row = {"run": record["run_hash"][:12], "epoch": record["epoch"], "iteration": record["iteration"]}
        row.update({f"loss_{k}": v for k, v in record["losses"].items()})
        row.update({f"lr_{k}": v for k, v in record["learning_rates"].items()})
        rows.append(row)
    return pd.DataFrame(rows)


def load_evaluations(db: Database, run_hash: Optional[str] = None) -> pd.DataFrame:
    """Valutazioni periodiche con AP globali (in percentuale) e AP per classe"""
    rows = []
    for record in db.load_evaluations(run_hash):
        row = {
            "run": record["run_hash"][:12],
            "epoch": record["epoch"],
            "AP": 100 * record["ap"],
            "AP50": 100 * record["ap50"],
            "AP75": 100 * record["ap75"],
        }
        row.update({f"AP {k}": 100 * v for k, v in record["per_class"].items()})
        rows.append(row)
    return pd.DataFrame(rows)


def loss_figure(history: pd.DataFrame) -> go.Figure:
    """Grafico delle componenti di loss per epoca"""
    columns = [c for c in history.columns if c.startswith("loss_")]
    long = history.melt(id_vars=["run", "epoch"], value_vars=columns, var_name="componente", value_name="loss")
    long["componente"] = long["componente"].str.replace("loss_", "", regex=False)
    fig = px.line(long, x="epoch", y="loss", color="componente", line_dash="run", markers=True)
    fig.update_layout(yaxis_type="log", legend_title_text="")
    return fig


def ap_figure(evaluations: pd.DataFrame) -> go.Figure:
    long = evaluations.melt(id_vars=["run", "epoch"], value_vars=["AP", "AP50", "AP75"],
                            var_name="metrica", value_name="valore")
    fig = px.line(long, x="epoch", y="valore", color="metrica", line_dash="run", markers=True)
    fig.update_layout(yaxis_title="%", yaxis_range=[0, 100], legend_title_text="")
    return fig


class Dashboard:
    """Dashboard per monitorare le esecuzioni di addestramento"""

    def __init__(self, db_path: str = "./runs/metrics.db"):
        """Inizializza la dashboard

        Args:
            db_path: Percorso del database delle metriche
        """
        self.db_path = db_path
        self.last_update = datetime.now()

    def run(self) -> None:
        """Avvia l'applicazione Streamlit"""
        st.set_page_config(
            page_title="Rilevamento Leucociti",
            page_icon="🔬",
            layout="wide",
            initial_sidebar_state="expanded"
        )
        st.title("🔬 Monitor dell'addestramento")

        if not os.path.exists(self.db_path):
            st.warning(f"Database non trovato: {self.db_path}. Abilitare 'database.enabled' e avviare un addestramento.")
            return

        db = Database(self.db_path)
        try:
            st.sidebar.header("Esecuzioni")
            runs = db.load_runs()
            if not runs:
                st.info("Nessuna epoca registrata")
                return
            selected = st.sidebar.selectbox("Esecuzione", ["tutte"] + runs,
                                            format_func=lambda r: r if r == "tutte" else r[:12])
            run_hash = None if selected == "tutte" else selected
            if st.sidebar.button("Aggiorna dati"):
                st.rerun()
            st.sidebar.info(f"Ultimo aggiornamento: {self.last_update.strftime('%d/%m/%Y %H:%M:%S')}")

            tab1, tab2, tab3 = st.tabs(["📉 Loss", "🎯 Valutazione", "💾 Checkpoint"])
            with tab1:
                self._render_loss_tab(db, run_hash)
            with tab2:
                self._render_evaluation_tab(db, run_hash)
            with tab3:
                self._render_checkpoint_tab(db, run_hash)
        finally:
            db.close()

    def _render_loss_tab(self, db: Database, run_hash: Optional[str]) -> None:
        st.header("📉 Andamento della loss")
        history = load_history(db, run_hash)
        if history.empty:
            st.info("Nessuna epoca disponibile")
            return
        st.plotly_chart(loss_figure(history), use_container_width=True)

        lr_columns = [c for c in history.columns if c.startswith("lr_")]
        if lr_columns:
            st.subheader("Learning rate")
            st.plotly_chart(px.line(history, x="epoch", y=lr_columns, log_y=True), use_container_width=True)
        st.dataframe(history, use_container_width=True, hide_index=True)

    def _render_evaluation_tab(self, db: Database, run_hash: Optional[str]) -> None:
        st.header("🎯 Precisione media")
        evaluations = load_evaluations(db, run_hash)
        if evaluations.empty:
            st.info("Nessuna valutazione disponibile")
            return
        st.plotly_chart(ap_figure(evaluations), use_container_width=True)

        # AP per classe dell'ultima valutazione
        latest = evaluations.sort_values("epoch").iloc[-1]
        per_class = {c[3:]: latest[c] for c in evaluations.columns if c.startswith("AP ") and pd.notna(latest[c])}
        if per_class:
            st.subheader(f"AP per classe (epoca {int(latest['epoch'])})")
            fig = px.bar(x=list(per_class), y=list(per_class.values()), labels={"x": "classe", "y": "AP %"})
            st.plotly_chart(fig, use_container_width=True)
        st.dataframe(evaluations.round(1), use_container_width=True, hide_index=True)

    def _render_checkpoint_tab(self, db: Database, run_hash: Optional[str]) -> None:
        st.header("💾 Checkpoint salvati")
        checkpoints = pd.DataFrame(db.load_checkpoints(run_hash))
        if checkpoints.empty:
            st.info("Nessun checkpoint registrato")
            return
        st.dataframe(checkpoints, use_container_width=True, hide_index=True)


def run_dashboard():
    """Funzione principale per avviare la dashboard"""
    dashboard = Dashboard(os.environ.get("LEUKODET_DB", "./runs/metrics.db"))
    dashboard.run()


if __name__ == "__main__":
    run_dashboard()
